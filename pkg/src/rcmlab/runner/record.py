"""Result records: running an experiment, persisting it and replaying it."""

from __future__ import annotations

import hashlib
import json
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_dict, parse_config
from .pipelines import FINISHERS, PIPELINES, field_artifact

SCHEMA_VERSION = 1
RECORD_NAME = "record.json"
RNG_PROVENANCE = ("environment: Philox4x64 keyed by the seed, one counter per edge; "
                  "walks: PCG64 over SeedSequence([seed, stream]); "
                  "conditioning retries: SeedSequence([seed, attempt])")

STATUS_OK = "ok"
STATUS_CHECK_FAILED = "check-failed"
STATUS_ERROR = "error"


class SchemaMismatch(ValueError):
    pass


class RecordExists(FileExistsError):
    pass


def _plain(obj):
    """Convert numpy scalars/arrays (and nested containers) to JSON types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # "inf", "nan": JSON has no literal for them
    return obj


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class ResultRecord:
    schema_version: int
    experiment: str
    config: dict
    config_text: str
    config_hash: str
    seeds: list
    threads: int
    rng: str
    started: float
    wall_seconds: float
    platform: dict
    deterministic: dict  # seed -> section -> value
    statistical: dict  # seed -> name -> {"value": [...], "stderr": [...]}
    checks: dict  # seed -> check -> bool
    artifacts: dict  # file name -> sha256
    aggregate: dict = field(default_factory=dict)
    status: str = STATUS_OK
    error: str | None = None

    @property
    def failed_checks(self) -> list[str]:
        return [f"{s}.{k}" for s, cs in self.checks.items() for k, v in cs.items() if not v]

    def to_json(self) -> str:
        return json.dumps(_plain(asdict(self)), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatch(
                f"record schema version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}")
        return cls(**d)


def load_record(path) -> ResultRecord:
    path = Path(path)
    if path.is_dir():
        path = path / RECORD_NAME
    return ResultRecord.from_dict(json.loads(path.read_text()))


def _inside(out_dir: Path, name: str) -> Path:
    target = (out_dir / name).resolve()
    if out_dir.resolve() not in target.parents:
        raise ValueError(f"artifact {name!r} would be written outside {out_dir}")
    return target


def _run_seeds(cfg: ExperimentConfig, threads: int):
    fn = PIPELINES[cfg.experiment]
    seeds = cfg.seeds()
    if threads <= 1:
        return seeds, [fn(cfg, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return seeds, list(pool.map(lambda s: fn(cfg, s), seeds))


def execute(cfg: ExperimentConfig, threads: int = 1) -> tuple[ResultRecord, dict, list]:
    """Run every seed; returns the record (not yet written), artifacts and raw results."""
    t0 = time.time()
    rec = ResultRecord(
        schema_version=SCHEMA_VERSION, experiment=cfg.experiment, config=cfg.as_dict(),
        config_text=cfg.text, config_hash=cfg.hash(), seeds=cfg.seeds(), threads=int(threads),
        rng=RNG_PROVENANCE, started=t0, wall_seconds=0.0,
        platform={"python": platform.python_version(), "numpy": np.__version__},
        deterministic={}, statistical={}, checks={}, artifacts={},
    )
    artifacts: dict[str, str] = {}
    results: list = []
    try:
        seeds, results = _run_seeds(cfg, threads)
        for s, r in zip(seeds, results):
            key = str(s)
            rec.deterministic[key] = _plain(r["deterministic"])
            rec.statistical[key] = _plain(r["statistical"])
            rec.checks[key] = _plain(r["checks"])
            artifacts.update(r["artifacts"])
        if cfg.experiment in FINISHERS:
            fin = FINISHERS[cfg.experiment](cfg, results)
            rec.aggregate = _plain(fin["deterministic"])
            rec.checks["aggregate"] = _plain(fin["checks"])
            artifacts.update(fin["artifacts"])
        rec.status = STATUS_CHECK_FAILED if rec.failed_checks else STATUS_OK
    except Exception as exc:  # flushed with a failure marker by the caller
        rec.status = STATUS_ERROR
        rec.error = f"{cfg.experiment}: {type(exc).__name__}: {exc}"
    rec.wall_seconds = time.time() - t0
    rec.artifacts = {name: _sha(text) for name, text in sorted(artifacts.items())}
    return rec, artifacts, results


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> ResultRecord:
    """Run, then write ``record.json`` and the artifacts under the output directory.

    Records are append-only: an existing ``record.json`` is never overwritten.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    target = out / RECORD_NAME
    if target.exists():
        raise RecordExists(f"{target} already exists; records are append-only")
    rec, artifacts, results = execute(cfg, threads)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in artifacts.items():
        _inside(out, name).write_text(text)
    if cfg.dump_fields:
        for s, r in zip(cfg.seeds(), results):
            if "field" in r:
                _inside(out, f"field_{s}.bin")
                field_artifact(r["field"], out, s)
    # write-then-rename so a crash never leaves a half record
    tmp = out / (RECORD_NAME + ".tmp")
    tmp.write_text(rec.to_json())
    os.replace(tmp, target)
    return rec


def config_of(rec: ResultRecord) -> ExperimentConfig:
    """The config embedded in a record, checked against the stored hash."""
    cfg = parse_config(rec.config_text) if rec.config_text else config_from_dict(rec.config)
    cfg_d = config_from_dict(rec.config)
    if cfg_d.hash() != rec.config_hash:
        raise ValueError("embedded config does not match the recorded hash")
    if cfg.hash() != rec.config_hash:
        raise ValueError("embedded config text does not match the recorded hash")
    return cfg


@dataclass
class ReplayReport:
    clean: bool
    deterministic_diffs: list  # names of tables that differ bit-wise
    statistical_diffs: list  # names of estimates outside 3 combined standard errors
    artifact_diffs: list
    threads: int

    def summary(self) -> str:
        if self.clean:
            return "clean: deterministic sections identical, statistical sections within 3 SE"
        lines = [f"deterministic table differs: {n}" for n in self.deterministic_diffs]
        lines += [f"statistical estimate outside 3 SE: {n}" for n in self.statistical_diffs]
        lines += [f"artifact differs: {n}" for n in self.artifact_diffs]
        return "\n".join(lines)


def _diff_tables(old: dict, new: dict, prefix: str) -> list[str]:
    names = []
    for key in sorted(set(old) | set(new)):
        a, b = old.get(key, "<missing>"), new.get(key, "<missing>")
        if json.dumps(a, sort_keys=True) != json.dumps(b, sort_keys=True):
            names.append(f"{prefix}{key}")
    return names


def _diff_stats(old: dict, new: dict, prefix: str, n_se: float) -> list[str]:
    names = []
    for key in sorted(set(old) | set(new)):
        if key not in old or key not in new:
            names.append(f"{prefix}{key}")
            continue
        a, b = old[key], new[key]
        va, vb = np.asarray(a["value"], float), np.asarray(b["value"], float)
        sa, sb = np.asarray(a["stderr"], float), np.asarray(b["stderr"], float)
        if va.shape != vb.shape:
            names.append(f"{prefix}{key}")
            continue
        se = np.sqrt(sa**2 + sb**2)
        if np.any(np.abs(va - vb) > n_se * se + 1e-12 * np.abs(va)):
            names.append(f"{prefix}{key}")
    return names


def replay(record, threads: int = 1, n_se: float = 3.0) -> ReplayReport:
    """Re-run a record's config and seeds and compare against the stored outputs."""
    directory = None
    if isinstance(record, ResultRecord):
        rec = record
    elif isinstance(record, dict):
        rec = ResultRecord.from_dict(record)
    else:
        path = Path(record)
        directory = path if path.is_dir() else path.parent
        rec = load_record(path)
    cfg = config_of(rec)
    new, artifacts, _ = execute(cfg, threads)
    det, stat = [], []
    for s in sorted(set(rec.deterministic) | set(new.deterministic)):
        det += _diff_tables(rec.deterministic.get(s, {}), new.deterministic.get(s, {}),
                            f"seed {s}: deterministic.")
        det += _diff_tables(rec.checks.get(s, {}), new.checks.get(s, {}), f"seed {s}: checks.")
        stat += _diff_stats(rec.statistical.get(s, {}), new.statistical.get(s, {}),
                            f"seed {s}: statistical.", n_se)
    det += _diff_tables(rec.aggregate, new.aggregate, "aggregate.")
    if new.status == STATUS_ERROR and rec.status != STATUS_ERROR:
        det.append(f"status: replay failed with {new.error}")
    art = _diff_tables(rec.artifacts, new.artifacts, "")
    if directory is not None:
        # the files next to the record must still match the recorded hashes
        for name, digest in sorted(rec.artifacts.items()):
            f = directory / name
            if not f.exists() or _sha(f.read_text()) != digest:
                if name not in art:
                    art.append(name)
    return ReplayReport(not (det or stat or art), det, stat, art, threads)
