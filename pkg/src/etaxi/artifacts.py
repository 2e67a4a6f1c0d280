"""On-disk artifacts.  Every file carries the hashes it was built from.

JSON artifacts hold a top-level ``meta`` object; CSV artifacts start with a
``# meta {...}`` comment line.  No timestamps are written, so identical
inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .mdp import MDPModel, Policy


class ArtifactError(RuntimeError):
    """Missing, unreadable or mismatched artifact (exit code 3)."""


def file_hash(path: str | Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing artifact {path}") from exc


def write_json(path: Path, payload: dict, meta: dict) -> None:
    body = {"meta": meta, **payload}
    path.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing artifact {path}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt artifact {path}: {exc}") from exc


def meta_line(meta: dict) -> str:
    return "# meta " + json.dumps(meta, sort_keys=True) + "\n"


def read_meta(path: Path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        return read_json(path).get("meta", {})
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing artifact {path}") from exc
    return json.loads(first[len("# meta "):]) if first.startswith("# meta ") else {}


def check_inputs(meta: dict, expected: dict[str, str], what: str) -> None:
    got = meta.get("inputs", {})
    for name, digest in expected.items():
        if got.get(name) != digest:
            raise ArtifactError(f"{what} was built from a different {name} "
                                f"(recorded {got.get(name)}, found {digest}); rerun the earlier stage")


def _fmt(v: float) -> str:
    return repr(float(v)) if np.isfinite(v) else ("-inf" if v < 0 else "inf")


def write_values(path: Path, policy: Policy, meta: dict) -> None:
    """Wide CSV: one row per (t, junction), one column per battery bin."""
    m = policy.model
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(meta_line(meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "junction"] + [f"b{b}" for b in range(m.n_bins)])
        for t in range(m.horizon + 1):
            for i, jid in enumerate(m.junctions):
                w.writerow([t, int(jid)] + [_fmt(v) for v in policy.values[t, i]])


def write_policy(path: Path, policy: Policy, meta: dict) -> None:
    """Long CSV of state -> best and runner-up action for every live state."""
    m = policy.model
    n_tau = len(m.taus)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(meta_line(meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "junction", "battery_bin", "value", "best_target", "best_tau",
                    "second_target", "second_tau"])
        for t, i, b in zip(*np.nonzero(policy.best >= 0)):
            a1, a2 = int(policy.best[t, i, b]), int(policy.second[t, i, b])
            j2 = int(m.junctions[a2 // n_tau]) if a2 >= 0 else ""
            tau2 = m.taus[a2 % n_tau] if a2 >= 0 else ""
            w.writerow([t, int(m.junctions[i]), b, _fmt(policy.values[t, i, b]),
                        int(m.junctions[a1 // n_tau]), m.taus[a1 % n_tau], j2, tau2])


def read_policy(values_path: Path, policy_path: Path, model: MDPModel) -> Policy:
    """Rebuild a Policy from its two CSV files against a freshly built model."""
    H, K, NB = model.horizon, model.K, model.n_bins
    n_tau = len(model.taus)
    values = np.zeros((H + 1, K, NB))
    with open(values_path, encoding="utf-8") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rows)
        if len(header) != NB + 2:
            raise ArtifactError("value table does not match the model's battery bins")
        for row in rows:
            t, i = int(row[0]), model.index[int(row[1])]
            values[t, i] = [float(x) for x in row[2:]]
    best = np.full((H, K, NB), -1, dtype=np.int32)
    second = np.full((H, K, NB), -1, dtype=np.int32)
    tau_idx = {tau: k for k, tau in enumerate(model.taus)}
    with open(policy_path, encoding="utf-8") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            t, i, b = int(row["t"]), model.index[int(row["junction"])], int(row["battery_bin"])
            best[t, i, b] = model.index[int(row["best_target"])] * n_tau + tau_idx[int(row["best_tau"])]
            if row["second_target"]:
                second[t, i, b] = model.index[int(row["second_target"])] * n_tau + tau_idx[int(row["second_tau"])]
    return Policy(model, values, best, second)


def rows_to_csv(path: Path, rows: list[dict], meta: dict | None = None) -> None:
    buf = io.StringIO()
    if meta is not None:
        buf.write(meta_line(meta))
    if rows:
        w = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
