"""JSON Lines trajectory logs.

Every file starts with one header line, followed by one line per
``(run, pos, iter, token)`` snapshot::

    {"kind": "header", "schema": "sjdvp.trajectory/1", "fingerprint": "...", "meta": {...}}
    {"kind": "record", "run": "7:0", "pos": 3, "iter": 2, "token": 5, "prob": 0.41, ...}

Record fields:

``run``            run id (string ``"<seed>:<prompt>"`` from the harness)
``pos``            absolute sequence position
``iter``           loop iteration whose parallel pass produced ``prob``
``token``          vocabulary index
``prob``           model probability of ``token`` at ``pos`` in that pass
``drafted``        the drafter sampled ``token`` from this snapshot
``accepted``       final snapshot, ``token`` passed verification here
``resampled``      final snapshot, ``token`` is the correction drawn here
``final``          ``token`` is the committed token at ``pos``
``masked``         growth mask the drafter computed (null for non-VP drafters
                   and for the final, verification-only snapshot)
``in_candidates``  token was in the top-k candidate set (null as above)
``pbar``/``score`` reference and score the drafter computed (null as above)
``p_after``        drafting probability after fusion (null as above)

``meta`` carries the decoder name, ``L`` and the number of growth
comparisons so the mask can be recomputed from the log alone. Keys are
written sorted and floats with ``repr`` precision, so a log round-trips
bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

from .errors import AnalysisInputError

SCHEMA = "sjdvp.trajectory/1"
REQUIRED = ("run", "pos", "iter", "token", "prob", "drafted", "accepted", "resampled", "final", "masked")


def dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


class TrajectoryWriter:
    def __init__(self, path: str | Path, fingerprint: str, meta: dict | None = None):
        self.path = Path(path)
        self._fh: IO[str] | None = self.path.open("w", encoding="utf-8")
        self._fh.write(dumps({"kind": "header", "schema": SCHEMA, "fingerprint": fingerprint, "meta": meta or {}}) + "\n")

    def write(self, record: dict) -> None:
        assert self._fh is not None
        self._fh.write(dumps({"kind": "record", **record}) + "\n")

    def write_all(self, records: Iterable[dict]) -> None:
        for r in records:
            self.write(r)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "TrajectoryWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class TrajectoryLog:
    fingerprint: str
    meta: dict
    records: list[dict] = field(default_factory=list)


def _parse_file(path: Path) -> tuple[dict, list[dict]]:
    header = None
    records: list[dict] = []
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise AnalysisInputError(f"{path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnalysisInputError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
            kind = obj.get("kind") if isinstance(obj, dict) else None
            if kind == "header":
                if header is not None:
                    raise AnalysisInputError(f"{path}:{lineno}: second header line")
                if obj.get("schema") != SCHEMA:
                    raise AnalysisInputError(f"{path}: unsupported schema {obj.get('schema')!r}")
                header = obj
            elif kind == "record":
                if header is None:
                    raise AnalysisInputError(f"{path}:{lineno}: record before header")
                missing = [k for k in REQUIRED if k not in obj]
                if missing:
                    raise AnalysisInputError(f"{path}:{lineno}: missing fields {missing}")
                del obj["kind"]
                records.append(obj)
            else:
                raise AnalysisInputError(f"{path}:{lineno}: unknown line kind {kind!r}")
    if header is None:
        raise AnalysisInputError(f"{path}: empty log (no header)")
    return header, records


def read_logs(paths: Sequence[str | Path]) -> TrajectoryLog:
    """Concatenate logs; every file must carry the same fingerprint."""
    if not paths:
        raise AnalysisInputError("no log files given")
    log: TrajectoryLog | None = None
    for path in paths:
        header, records = _parse_file(Path(path))
        if log is None:
            log = TrajectoryLog(header["fingerprint"], header.get("meta", {}), records)
        elif header["fingerprint"] != log.fingerprint:
            raise AnalysisInputError(
                f"{path}: fingerprint {header['fingerprint']} differs from {log.fingerprint}; refusing to mix runs"
            )
        else:
            log.records.extend(records)
    assert log is not None
    seen = set()
    for r in log.records:
        key = (r["run"], r["pos"], r["iter"], r["token"])
        if key in seen:
            raise AnalysisInputError(f"duplicate record for run/pos/iter/token {key}")
        seen.add(key)
    return log


__all__ = ["SCHEMA", "TrajectoryWriter", "TrajectoryLog", "read_logs", "dumps"]
