"""Sweeps over (profile, seed, lambda): training, persistence, diagnostics, aggregation."""

from __future__ import annotations

import csv
import datetime as _dt
import functools
import json
import shutil
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__, fairlab, models, train
from ..errors import ConfigError, DiagnosticWarning, DivergedError, StudyFailed
from .config import DEVIATION_NOTES, ExperimentConfig, config_from_dict, load_config

METRICS_COLUMNS = ["run_id", "profile_id", "seed", "lambda", "group", "loss", "accuracy", "grad_norm", "lambda_max", "dtb_mean"]
SENSITIVITY_COLUMNS = ["seed", "lambda", "group", "delta", "term1", "term2", "rhs", "slack"]


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def run_id(profile_id: str, seed: int, lam: float) -> str:
    return f"{profile_id}__s{seed}__l{lam:.6g}"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _config_payload(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.to_dict(), "base_dir": cfg.base_dir, "output": cfg.output}


def _config_from_payload(payload: dict) -> ExperimentConfig:
    cfg = config_from_dict(payload["config"], payload.get("base_dir", "."))
    return cfg.with_output(payload.get("output", cfg.output))


@functools.lru_cache(maxsize=4)
def _splits(payload_json: str):
    cfg = _config_from_payload(json.loads(payload_json))
    return cfg.dataset.prepare(Path(cfg.base_dir))


# ---------------------------------------------------------------- one run


def _train_job(payload_json: str, out_dir: str, profile_id: str, seed: int, lam: float) -> dict:
    """Train one (profile, seed, lambda) cell and write its checkpoint and trace."""
    cfg = _config_from_payload(json.loads(payload_json))
    tr, _ = _splits(payload_json)
    rid = run_id(profile_id, seed, lam)
    rel = Path("runs") / rid
    rdir = Path(out_dir) / rel
    rdir.mkdir(parents=True, exist_ok=True)
    record = {"run_id": rid, "profile_id": profile_id, "seed": seed, "lambda": lam, "artifacts": []}
    tcfg = cfg.train_config(seed, lam)
    try:
        tm = train.sgd_train(models.init_model(cfg.model, seed), tr, tcfg, cfg.profiles[profile_id], init_seed=seed)
    except DivergedError as exc:
        record.update(status="failed", error=str(exc), epoch=exc.epoch, step=exc.step)
        return record
    header = {"run_id": rid, "profile_id": profile_id, "seed": seed, "lambda": lam,
              "config_hash": cfg.config_hash, "provenance": tm.provenance}
    models.save_checkpoint(rdir / "checkpoint.bin", tm.model, header)
    train.write_trace_csv(tm, rdir / "trace.csv", tr.group_names)
    record.update(
        status="ok", param_sha256=tm.param_hash, provenance=tm.provenance,
        artifacts=[str(rel / "checkpoint.bin"), str(rel / "trace.csv")],
    )
    return record


def _checkpoint_ok(out_dir: Path, rec: dict) -> bool:
    try:
        model, _ = models.load_checkpoint(out_dir / "runs" / rec["run_id"] / "checkpoint.bin")
    except Exception:
        return False
    return model.params.sha256() == rec.get("param_sha256")


# ---------------------------------------------------------------- diagnostics


def _group_accuracy(model, ds) -> list[float]:
    pred = model.predict(ds.features)
    return [float(np.mean(pred[ds.groups == a] == ds.labels[ds.groups == a])) for a in range(ds.n_groups)]


def _run_metrics(model, tr, te, curvature: bool, seed: int):
    """Per-group rows plus the group eigenvalues (reused by the Taylor report)."""
    acc = _group_accuracy(model, te)
    gg = fairlab.group_gradient_norms(model, tr)
    lam = np.full(tr.n_groups, np.nan)
    conv = np.zeros(tr.n_groups, dtype=bool)
    if curvature:
        for a in range(tr.n_groups):
            res = fairlab.group_hessian_lmax(model, tr, a, seed=seed)
            lam[a], conv[a] = res.lambda_max, res.converged
    dtb = [np.nan] * tr.n_groups
    if model.spec.head != "linear":
        delta = fairlab.boundary_distance(model.probs(tr.features))
        dtb = [float(delta[tr.groups == a].mean()) for a in range(tr.n_groups)]
    rows = []
    for a in range(tr.n_groups):
        rows.append({
            "group": tr.group_names[a], "loss": fairlab.group_loss(model, tr, a), "accuracy": acc[a],
            "grad_norm": float(gg.norms[a]), "lambda_max": float(lam[a]), "dtb_mean": dtb[a],
        })
    overall = float(np.mean(model.predict(te.features) == te.labels))
    return rows, lam, conv, overall


def _aggregate(rows, keys, values) -> list[dict]:
    groups = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in keys)].append(r)
    out = []
    for key, rs in groups.items():
        rec = dict(zip(keys, key))
        rec["n"] = len(rs)
        for v in values:
            xs = np.array([float(r[v]) for r in rs])
            rec[f"{v}_mean"] = float(np.mean(xs))
            rec[f"{v}_std"] = float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0
        out.append(rec)
    return out


# ---------------------------------------------------------------- sweep


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict
    ok: bool
    models: dict = field(default_factory=dict)  # run_id -> Model, successful runs only


def _resolve(cfg_or_path, output=None) -> ExperimentConfig:
    cfg = cfg_or_path if isinstance(cfg_or_path, ExperimentConfig) else load_config(cfg_or_path)
    if output is not None:
        cfg = cfg.with_output(output)
    return cfg


def run_experiment(cfg_or_path, output=None, workers: int = 1, force: bool = False, diagnostics: bool = True) -> RunResult:
    """Train every (profile, seed, lambda) cell, then write reports and aggregates.

    Completed runs recorded in an existing manifest with the same config hash
    are reused unless ``force`` is set. Diverged runs are marked failed and
    the sweep continues.
    """
    cfg = _resolve(cfg_or_path, output)
    # validate the dataset against the model before anything touches the disk
    try:
        tr, te = cfg.dataset.prepare(Path(cfg.base_dir))
    except Exception as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    if tr.dim != cfg.model.input_dim:
        raise ConfigError(f"model.input_dim is {cfg.model.input_dim} but the dataset has {tr.dim} features")
    if (tr.group_sizes == 0).any():
        raise ConfigError("every group must appear in the training split")

    out = Path(cfg.output)
    payload = _config_payload(cfg)
    payload_json = json.dumps(payload, sort_keys=True)
    previous = {}
    mpath = out / "manifest.json"
    if mpath.exists() and not force:
        old = json.loads(mpath.read_text())
        if old.get("config_hash") == cfg.config_hash:
            previous = {r["run_id"]: r for r in old.get("runs", []) if r.get("status") == "ok"}
    if force and out.exists():
        for sub in ("runs", "reports"):
            shutil.rmtree(out / sub, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)

    cells = [(p, s, lam) for lam in cfg.lambdas for s in cfg.seeds for p in cfg.profiles.ids]
    manifest = {
        "tool": "hwfair", "tool_version": __version__, "config_hash": cfg.config_hash, **payload,
        "status": "running", "started": _now(), "profile_ids": cfg.profiles.ids,
        "reference_id": cfg.profiles.reference_id, "seeds": list(cfg.seeds), "lambdas": list(cfg.lambdas),
        "deviation_notes": list(DEVIATION_NOTES),
        "dataset": {"train_sha256": tr.sha256(), "test_sha256": te.sha256(), "n_train": len(tr), "n_test": len(te),
                    "group_names": list(tr.group_names), "label_names": list(tr.label_names),
                    "group_mapping": tr.meta.get("group_mapping"), "label_mapping": tr.meta.get("label_mapping")},
        "runs": [{"run_id": run_id(*c), "profile_id": c[0], "seed": c[1], "lambda": c[2], "status": "pending"} for c in cells],
        "artifacts": [],
    }
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    records = {}
    todo = []
    for c in cells:
        rid = run_id(*c)
        rec = previous.get(rid)
        if rec is not None and _checkpoint_ok(out, rec):
            records[rid] = {**rec, "reused": True}
        else:
            todo.append(c)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_job, payload_json, str(out), *c) for c in todo]
            for f in futures:
                rec = f.result()
                records[rec["run_id"]] = rec
    else:
        for c in todo:
            rec = _train_job(payload_json, str(out), *c)
            records[rec["run_id"]] = rec
    manifest["runs"] = [records[run_id(*c)] for c in cells]

    loaded = {}
    for c in cells:
        rec = records[run_id(*c)]
        if rec["status"] == "ok":
            loaded[rec["run_id"]] = models.load_checkpoint(out / "runs" / rec["run_id"] / "checkpoint.bin")[0]

    metrics_rows, sens_rows, artifacts = [], [], []
    eig_cache = {}
    for rec in manifest["runs"]:
        if rec["status"] != "ok":
            continue
        rows, lam, conv, overall = _run_metrics(
            loaded[rec["run_id"]], tr, te, cfg.curvature and diagnostics, rec["seed"])
        rec["test_accuracy"] = overall
        eig_cache[rec["run_id"]] = (lam, conv)
        for r in rows:
            metrics_rows.append({"run_id": rec["run_id"], "profile_id": rec["profile_id"], "seed": rec["seed"],
                                 "lambda": rec["lambda"], **r})
    if diagnostics:
        ref = cfg.profiles.reference_id
        for lam_v in cfg.lambdas:
            for s in cfg.seeds:
                by_profile = {p: loaded[run_id(p, s, lam_v)] for p in cfg.profiles.ids if run_id(p, s, lam_v) in loaded}
                if ref not in by_profile:
                    continue
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", DiagnosticWarning)
                    sens = fairlab.sensitivity_report(by_profile, ref, tr)
                    lam_arr, conv = eig_cache[run_id(ref, s, lam_v)]
                    tay = fairlab.taylor_bound_report(by_profile, ref, tr, seed=s, lambda_max=lam_arr, converged=conv)
                rel = Path("reports") / f"seed{s}_lam{lam_v:.6g}"
                (out / rel).mkdir(parents=True, exist_ok=True)
                for name, text in (("sensitivity.json", sens.to_json()), ("sensitivity_table.csv", sens.to_csv()),
                                   ("taylor.json", tay.to_json())):
                    (out / rel / name).write_text(text)
                    artifacts.append(str(rel / name))
                for row in tay.rows():
                    sens_rows.append({"seed": s, "lambda": lam_v, **{k: row[k] for k in SENSITIVITY_COLUMNS[2:]}})

    _write_csv(out / "metrics.csv", METRICS_COLUMNS, metrics_rows)
    artifacts.append("metrics.csv")
    summary = _aggregate(metrics_rows, ["profile_id", "lambda", "group"],
                         ["loss", "accuracy", "grad_norm", "lambda_max", "dtb_mean"])
    _write_csv(out / "metrics_summary.csv", list(summary[0]) if summary else ["profile_id"], summary)
    artifacts.append("metrics_summary.csv")
    if diagnostics:
        _write_csv(out / "sensitivity.csv", SENSITIVITY_COLUMNS, sens_rows)
        ssum = _aggregate(sens_rows, ["lambda", "group"], ["delta", "term1", "term2", "rhs", "slack"])
        _write_csv(out / "sensitivity_summary.csv", list(ssum[0]) if ssum else ["lambda"], ssum)
        artifacts += ["sensitivity.csv", "sensitivity_summary.csv"]

    ok = all(r["status"] == "ok" for r in manifest["runs"])
    manifest.update(status="complete" if ok else "partial", finished=_now(), artifacts=artifacts)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunResult(out, manifest, ok, loaded)


# ---------------------------------------------------------------- mitigation


def _select(table: dict, budget: float):
    """Smallest-spread lambda whose accuracy is within ``budget`` of lambda = 0."""
    base = table[0.0]
    feasible = [lam for lam, v in table.items() if base["accuracy"] - v["accuracy"] <= budget + 1e-12]
    best = min(feasible, key=lambda lam: (table[lam]["spread"], lam))
    red = 1.0 - table[best]["spread"] / base["spread"] if base["spread"] > 0 else 0.0
    return best, red


def mitigation_study(cfg_or_path, output=None, workers: int = 1, force: bool = False) -> dict:
    """Grid search over the penalty weight, comparing group-accuracy spreads.

    Spread is max_a acc_a - min_a acc_a on the test split, averaged across
    profiles (and seeds for the pooled selection). Writes mitigation.json and
    mitigation.csv next to the sweep outputs.
    """
    cfg = _resolve(cfg_or_path, output)
    lambdas = cfg.mitigation.lambdas
    if 0.0 not in lambdas:
        raise ConfigError("mitigation grid must include 0")
    res = run_experiment(cfg.with_lambdas(lambdas), workers=workers, force=force, diagnostics=False)
    runs = [r for r in res.manifest["runs"] if r["status"] == "ok"]
    metrics = read_csv(res.out_dir / "metrics.csv")
    acc = defaultdict(dict)
    for m in metrics:
        acc[m["run_id"]][m["group"]] = float(m["accuracy"])
    cell = {}
    for r in runs:
        ga = list(acc[r["run_id"]].values())
        cell[(r["lambda"], r["seed"], r["profile_id"])] = (max(ga) - min(ga), r["test_accuracy"], acc[r["run_id"]])
    present = sorted({k[0] for k in cell})
    if not present:
        raise StudyFailed("every mitigation run diverged")
    if 0.0 not in present:
        raise StudyFailed("the lambda = 0 baseline diverged for every profile and seed")

    def summarize(keys):
        spreads = [cell[k][0] for k in keys]
        accs = [cell[k][1] for k in keys]
        return {"spread": float(np.mean(spreads)), "accuracy": float(np.mean(accs)), "n_runs": len(keys)}

    pooled = {lam: summarize([k for k in cell if k[0] == lam]) for lam in present}
    best, red = _select(pooled, cfg.mitigation.accuracy_budget)
    per_seed = []
    for s in cfg.seeds:
        table = {lam: summarize([k for k in cell if k[0] == lam and k[1] == s]) for lam in present
                 if any(k[0] == lam and k[1] == s for k in cell)}
        if 0.0 not in table:
            continue
        b, rr = _select(table, cfg.mitigation.accuracy_budget)
        per_seed.append({"seed": s, "lambda_star": b, "spread_baseline": table[0.0]["spread"],
                         "spread_star": table[b]["spread"], "reduction": rr,
                         "accuracy_drop": table[0.0]["accuracy"] - table[b]["accuracy"]})
    group_names = list(next(iter(acc.values())).keys())
    pre_post = []
    for g in group_names:
        pre = np.mean([cell[k][2][g] for k in cell if k[0] == 0.0])
        post = np.mean([cell[k][2][g] for k in cell if k[0] == best])
        pre_post.append({"group": g, "accuracy_baseline": float(pre), "accuracy_mitigated": float(post)})
    report = {
        "config_hash": cfg.config_hash, "lambdas": list(present), "accuracy_budget": cfg.mitigation.accuracy_budget,
        "by_lambda": {fmt(lam): v for lam, v in pooled.items()}, "lambda_star": best, "reduction": red,
        "per_seed": per_seed, "groups": pre_post,
    }
    (res.out_dir / "mitigation.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _write_csv(res.out_dir / "mitigation.csv", ["group", "accuracy_baseline", "accuracy_mitigated"], pre_post)
    manifest = res.manifest
    manifest["artifacts"] += ["mitigation.json", "mitigation.csv"]
    (res.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return report


def format_mitigation(report: dict) -> str:
    lines = [f"lambda*: {report['lambda_star']:g}  spread reduction: {100 * report['reduction']:.1f}%"]
    lines.append(f"{'lambda':>10} {'spread':>10} {'accuracy':>10}")
    for lam, v in report["by_lambda"].items():
        lines.append(f"{float(lam):>10g} {v['spread']:>10.4f} {v['accuracy']:>10.4f}")
    lines.append(f"{'group':>10} {'baseline':>10} {'mitigated':>10}")
    for g in report["groups"]:
        lines.append(f"{g['group']:>10} {g['accuracy_baseline']:>10.4f} {g['accuracy_mitigated']:>10.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- audits


@dataclass
class DeterminismReport:
    checked: int
    mismatches: list  # (run_id, reason)

    @property
    def ok(self) -> bool:
        return not self.mismatches and self.checked > 0


def check_determinism(out_dir) -> DeterminismReport:
    """Retrain every recorded run and compare against the manifest and the checkpoint on disk."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    payload = {k: manifest[k] for k in ("config", "base_dir", "output")}
    payload_json = json.dumps(payload, sort_keys=True)
    cfg = _config_from_payload(payload)
    tr, _ = _splits(payload_json)
    mismatches, checked = [], 0
    for rec in manifest["runs"]:
        if rec.get("status") != "ok":
            continue
        checked += 1
        tm = train.sgd_train(models.init_model(cfg.model, rec["seed"]), tr,
                             cfg.train_config(rec["seed"], rec["lambda"]), cfg.profiles[rec["profile_id"]], trace=False)
        if tm.param_hash != rec["param_sha256"]:
            mismatches.append((rec["run_id"], "retrained parameters differ from the manifest"))
            continue
        try:
            model, _ = models.load_checkpoint(out / "runs" / rec["run_id"] / "checkpoint.bin")
            disk = model.params.sha256()
        except Exception as exc:
            mismatches.append((rec["run_id"], f"checkpoint unreadable: {exc}"))
            continue
        if disk != tm.param_hash:
            mismatches.append((rec["run_id"], "checkpoint on disk differs from the retrained parameters"))
    return DeterminismReport(checked, mismatches)


def profile_isolation(manifest: dict) -> list[tuple[str, str]]:
    """Provenance keys that differ between runs sharing (seed, lambda), other than the profile id."""
    by_cell = defaultdict(list)
    for rec in manifest["runs"]:
        if rec.get("status") == "ok":
            by_cell[(rec["seed"], rec["lambda"])].append(rec["provenance"])
    diffs = []
    for cell, provs in by_cell.items():
        base = provs[0]
        for p in provs[1:]:
            for k in sorted(set(base) | set(p)):
                if k != "profile_id" and base.get(k) != p.get(k):
                    diffs.append((f"seed{cell[0]}_lam{cell[1]:g}", k))
    return diffs


def unreferenced_files(out_dir) -> list[str]:
    """Files under ``out_dir`` that the manifest does not list."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    listed = set(manifest.get("artifacts", []))
    for rec in manifest.get("runs", []):
        listed.update(rec.get("artifacts", []))
    found = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
    return sorted(found - listed)


def report(run_dir) -> str:
    """Human-readable summary of a finished sweep directory."""
    out = Path(run_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    runs = manifest["runs"]
    n_ok = sum(r.get("status") == "ok" for r in runs)
    lines = [
        f"run dir: {out}",
        f"config hash: {manifest['config_hash'][:16]}  status: {manifest['status']}  runs ok: {n_ok}/{len(runs)}",
        f"profiles: {', '.join(manifest['profile_ids'])} (reference {manifest['reference_id']})",
    ]
    if (out / "sensitivity_summary.csv").exists():
        lines.append(f"{'lambda':>8} {'group':>8} {'delta':>12} {'rhs':>12} {'slack':>12}")
        for r in read_csv(out / "sensitivity_summary.csv"):
            lines.append(f"{float(r['lambda']):>8g} {r['group']:>8} {float(r['delta_mean']):>12.4e} "
                         f"{float(r['rhs_mean']):>12.4e} {float(r['slack_mean']):>12.4e}")
    if (out / "metrics_summary.csv").exists():
        lines.append(f"{'profile':>14} {'lambda':>8} {'group':>8} {'accuracy':>9} {'grad_norm':>10}")
        for r in read_csv(out / "metrics_summary.csv"):
            lines.append(f"{r['profile_id']:>14} {float(r['lambda']):>8g} {r['group']:>8} "
                         f"{float(r['accuracy_mean']):>9.4f} {float(r['grad_norm_mean']):>10.4e}")
    if (out / "mitigation.json").exists():
        lines.append(format_mitigation(json.loads((out / "mitigation.json").read_text())))
    return "\n".join(lines)
