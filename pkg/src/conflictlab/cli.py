"""Pipeline orchestration: configuration, stage subcommands, experiment
directories, and the end-to-end reproduction driver.

One experiment = one directory with immutable stage outputs; every stage is
re-runnable from persisted inputs plus its seed, and stage ordering is
enforced through file-existence checks only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

# Thread cap must land before numpy initializes its BLAS pools.
_THREADS = os.environ.get("CONFLICTLAB_THREADS")
if _THREADS:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _THREADS)

import numpy as np

from . import baselines, datafiles, diffnet, diffusion, evalkit, guidance, surrogate, theory
from .config import (
    SEARCH_METHODS,
    default_config,
    load_config,
    policy_params,
    save_config,
    sim_config,
)
from .conflict import ConflictSpec
from .encoding import encode_trajectory, layout_for
from .scenarios import SCENARIOS, build_scenario

CONDITIONS_SCHEMA = "conditions-v1"
RECORDS_SCHEMA = "verification-records-v1"


# ---------------------------------------------------------------------------
# Experiment directory layout
# ---------------------------------------------------------------------------

class Experiment:
    """Path map and artifact loaders for one scenario inside a run dir."""

    def __init__(self, cfg: dict, scenario_kind: str):
        self.cfg = cfg
        self.kind = scenario_kind
        self.sim = sim_config(cfg)
        self.params = policy_params(cfg)
        self.scenario = build_scenario(scenario_kind, self.params)
        self.layout = layout_for(self.sim, scenario_kind)
        self.root = Path(cfg["out_dir"]) / scenario_kind

    # paths
    def dataset_path(self, role: str) -> Path:
        return self.root / "data" / f"D_{role}.jsonl"

    def checkpoint_path(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.npz"

    def calibration_path(self) -> Path:
        return self.root / "calibration.json"

    def search_path(self, method: str, seed: int, variant: str = "full") -> Path:
        tag = method if variant == "full" else f"{method}[{variant}]"
        return self.root / "search" / f"{tag}_seed{seed}.jsonl"

    def search_meta_path(self, method: str, seed: int, variant: str = "full") -> Path:
        return self.search_path(method, seed, variant).with_suffix(".meta.json")

    def records_path(self, method: str, seed: int, variant: str = "full") -> Path:
        tag = method if variant == "full" else f"{method}[{variant}]"
        return self.root / "records" / f"{tag}_seed{seed}.jsonl"

    def bounds_path(self, method: str, seed: int) -> Path:
        return self.root / "bounds" / f"{method}_seed{seed}.jsonl"

    def constants_path(self) -> Path:
        return self.root / "constants.json"

    # conflict spec with the calibrated threshold when available
    def conflict_spec(self, calibrated: bool = True) -> ConflictSpec:
        c = self.cfg["conflict"]
        threshold = c.get("tp_threshold")
        if threshold is None and calibrated and self.calibration_path().exists():
            threshold = json.loads(self.calibration_path().read_text())["tp_threshold"]
        return ConflictSpec(self.kind, c["theta_c"], c["p_max"], threshold)

    # artifact loaders
    def load_datasets(self):
        out = []
        for role in ("A", "B"):
            path = self.dataset_path(role)
            if not path.exists():
                raise FileNotFoundError(f"missing dataset file {path} (run collect first)")
            out.append(datafiles.read_dataset(path))
        return out

    def load_models(self) -> baselines.SurrogateModels:
        loads = {}
        for name in ("pol_a", "pol_b", "dyn"):
            path = self.checkpoint_path(name)
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint {path} (run train first)")
            loads[name] = diffnet.load_checkpoint(path)
        return baselines.SurrogateModels(
            surrogate.PolicyEnsemble.from_checkpoint(*loads["pol_a"], self.sim),
            surrogate.PolicyEnsemble.from_checkpoint(*loads["pol_b"], self.sim),
            surrogate.DynamicsEnsemble.from_checkpoint(*loads["dyn"], self.sim),
        )

    def load_denoiser(self) -> diffusion.Denoiser:
        path = self.checkpoint_path("denoiser")
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path} (run train first)")
        return diffusion.Denoiser.from_checkpoint(*diffnet.load_checkpoint(path))

    def schedule(self) -> diffusion.NoiseSchedule:
        d = self.cfg["diffusion"]
        return diffusion.NoiseSchedule(d["n_steps"], d["beta_start"], d["beta_end"])

    def guidance_config(self, n: int | None = None) -> guidance.GuidanceConfig:
        g = self.cfg["guidance"]
        return guidance.GuidanceConfig(
            gamma=g["gamma"], eta=g["eta"], delta=g["delta"],
            phi_weight=g["phi_weight"], n_candidates=n or g["n_candidates"],
            guide_temp=g.get("guide_temp", 4.0),
        )


def _scenarios_of(cfg: dict):
    return list(SCENARIOS) if cfg["scenario"] == "all" else [cfg["scenario"]]


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------

def cmd_collect(cfg: dict, force: bool = False):
    """Collect both marginal datasets per scenario with provenance tags."""
    for kind in _scenarios_of(cfg):
        exp = Experiment(cfg, kind)
        for i, role in enumerate(("A", "B")):
            path = exp.dataset_path(role)
            if path.exists() and not force:
                print(f"[collect] {path} exists, skipping")
                continue
            seed = cfg["data"]["collect_seed"] + 10 * SCENARIOS.index(kind) + i
            data = datafiles.collect_marginal(
                exp.scenario, exp.sim, role, cfg["data"]["episodes_per_set"], seed
            )
            datafiles.write_dataset(path, data)
            print(f"[collect] wrote {path} ({data.n_episodes} episodes)")


def cmd_train(cfg: dict, stage: str, force: bool = False):
    """Train surrogate ensembles or the trajectory diffusion prior."""
    if stage not in ("surrogate", "diffusion"):
        raise ValueError("stage must be 'surrogate' or 'diffusion'")
    for kind in _scenarios_of(cfg):
        exp = Experiment(cfg, kind)
        datasets = exp.load_datasets()
        exp.checkpoint_path("x").parent.mkdir(parents=True, exist_ok=True)
        if stage == "surrogate":
            s = cfg["surrogate"]
            todo = [("pol_a", "A"), ("pol_b", "B"), ("dyn", None)]
            for name, role in todo:
                path = exp.checkpoint_path(name)
                if path.exists() and not force:
                    print(f"[train] {path} exists, skipping")
                    continue
                t0 = time.perf_counter()
                if role is not None:
                    data = datasets[0] if role == "A" else datasets[1]
                    ens = surrogate.train_policy_ensemble(
                        data, role, exp.layout, n_members=s["n_members"],
                        seed=s["train_seed"], max_epochs=s["max_epochs"],
                        patience=s["patience"], batch=s["batch"], lr=s["lr"],
                    )
                    metric = f"val_acc={ens.val_accuracy:.3f}"
                else:
                    ens = surrogate.train_dynamics_ensemble(
                        datasets, exp.layout, n_members=s["n_members"],
                        seed=s["train_seed"], max_epochs=s["max_epochs"],
                        patience=s["patience"], batch=s["batch"], lr=s["lr"],
                    )
                    metric = f"val={ens.val_metrics}"
                diffnet.save_checkpoint(path, *ens.checkpoint_arrays())
                print(f"[train] {path} ({metric}, {time.perf_counter()-t0:.0f}s)")
        else:
            path = exp.checkpoint_path("denoiser")
            if path.exists() and not force:
                print(f"[train] {path} exists, skipping")
                continue
            d = cfg["diffusion"]
            pool = np.stack(
                [encode_trajectory(t, exp.sim, exp.layout)
                 for data in datasets for t in data.trajectories]
            )
            t0 = time.perf_counter()
            den = diffusion.train_denoiser(
                pool, exp.schedule(), exp.layout, seed=d["train_seed"],
                steps=d["train_steps"], batch=d["batch"], lr=d["lr"],
            )
            diffnet.save_checkpoint(path, *den.checkpoint_arrays())
            print(f"[train] {path} (val={den.history['val'][-1]:.3f}, "
                  f"{time.perf_counter()-t0:.0f}s)")


def _write_conditions(path: Path, exp: Experiment, method: str, seed: int,
                      conditions, j_hat, meta: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": CONDITIONS_SCHEMA,
        "scenario": exp.kind,
        "method": method,
        "seed": seed,
        "n": len(conditions),
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rank, (u, j) in enumerate(zip(conditions, j_hat)):
            fh.write(json.dumps(
                {"rank": rank, "j_hat": float(j),
                 "condition": datafiles.condition_to_dict(u)}) + "\n")
    with path.with_suffix(".meta.json").open("w") as fh:
        json.dump(meta, fh, indent=2, default=float)
        fh.write("\n")


def read_conditions(path: Path, sim):
    if not path.exists():
        raise FileNotFoundError(f"missing candidate file {path} (run search first)")
    with path.open() as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != CONDITIONS_SCHEMA:
            raise ValueError(f"unexpected schema in {path}")
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"empty candidate file {path}")
    conditions = [datafiles.condition_from_dict(r["condition"], sim) for r in rows]
    j_hat = np.array([r["j_hat"] for r in rows])
    return header, conditions, j_hat


def run_search(exp: Experiment, method: str, seed: int, variant: str = "full",
               n_override: int | None = None):
    """Run one searcher and persist ranked conditions plus run metadata."""
    cfg = exp.cfg
    spec = exp.conflict_spec(calibrated=False)
    models = exp.load_models()
    surrogate.QUERIES.reset()
    extras: dict = {}
    t0 = time.perf_counter()
    if method == "guided":
        den = exp.load_denoiser()
        g_cfg = exp.guidance_config()
        if variant != "full":
            g_cfg = evalkit.ablation_config(variant, g_cfg)
        n = n_override or g_cfg.n_candidates
        report, conditions, _ = guidance.guided_sample(
            n, g_cfg, den, exp.schedule(), exp.layout, exp.sim, spec,
            models.pol_a, models.pol_b, models.dyn, seed=seed,
        )
        j_hat = report.j_hat
        extras = {"aborted": report.aborted, "energy_rows": report.rows()[:50],
                  "traces": {k: v if isinstance(v, list) else list(v)
                              for k, v in report.traces.items()}}
        result_wall = time.perf_counter() - t0
    elif method == "rs":
        n = n_override or cfg["searchers"]["rs"]["n"]
        res = baselines.random_search(n, models, exp.sim, spec, exp.kind, seed)
        conditions, j_hat, result_wall = res.conditions, res.j_hat, res.wall_clock_s
    elif method == "cem":
        s = cfg["searchers"]["cem"]
        res = baselines.cem_search(models, exp.sim, spec, exp.kind, seed,
                                   pop=n_override or s["pop"],
                                   elite_frac=s["elite_frac"],
                                   generations=s["generations"])
        conditions, j_hat, result_wall = res.conditions, res.j_hat, res.wall_clock_s
        extras = {"elite_history": res.extras["elite_history"]}
    elif method == "bptt":
        s = cfg["searchers"]["bptt"]
        res = baselines.bptt_search(models, exp.sim, spec, exp.kind, seed,
                                    n_restarts=n_override or s["n_restarts"],
                                    steps=s["steps"], lr=s["lr"],
                                    grad_clip=s["grad_clip"])
        conditions, j_hat, result_wall = res.conditions, res.j_hat, res.wall_clock_s
        extras = {"best_history": res.extras["best_history"],
                  "aborted": res.extras["aborted"]}
    else:
        raise ValueError(f"unknown search method {method!r}")
    meta = {
        "method": method, "variant": variant, "seed": seed,
        "wall_clock_s": result_wall,
        "surrogate_queries": surrogate.QUERIES.units,
        "n_emitted": len(conditions),
        "extras": extras,
    }
    path = exp.search_path(method, seed, variant)
    _write_conditions(path, exp, method, seed, conditions, j_hat, meta)
    print(f"[search] {path} ({len(conditions)} candidates, "
          f"{result_wall:.1f}s, {surrogate.QUERIES.units:.0f} queries)")
    return path


def cmd_search(cfg: dict, method: str, seeds=None, variant: str = "full",
               force: bool = False):
    for kind in _scenarios_of(cfg):
        exp = Experiment(cfg, kind)
        for seed in seeds or cfg["seeds"]:
            path = exp.search_path(method, seed, variant)
            if path.exists() and not force:
                print(f"[search] {path} exists, skipping")
                continue
            run_search(exp, method, seed, variant)


def ensure_calibration(exp: Experiment) -> dict:
    """Compute and persist the labeling threshold on first use."""
    path = exp.calibration_path()
    if path.exists():
        return json.loads(path.read_text())
    cal_cfg = exp.cfg["calibration"]
    models = exp.load_models()
    roller = baselines.SurrogateRollout(
        models, exp.sim, exp.conflict_spec(calibrated=False), exp.kind
    )
    result = evalkit.calibrate_tp_threshold(
        roller.score_conditions, exp.scenario, exp.sim,
        exp.conflict_spec(calibrated=False),
        seed=cal_cfg["seed"], n_conditions=cal_cfg["n_conditions"],
        top_k=cal_cfg["top_k"], target=cal_cfg["target"],
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=2) + "\n")
    print(f"[calibrate] {exp.kind}: threshold={result['tp_threshold']:.3f} "
          f"(top-rate {result['achieved_top_rate']:.2f})")
    return result


def verify_search_output(exp: Experiment, method: str, seed: int,
                         variant: str = "full", force: bool = False):
    rec_path = exp.records_path(method, seed, variant)
    if rec_path.exists() and not force:
        return rec_path
    ensure_calibration(exp)
    spec = exp.conflict_spec()
    header, conditions, j_hat = read_conditions(
        exp.search_path(method, seed, variant), exp.sim
    )
    tag = method if variant == "full" else f"{method}[{variant}]"
    records = evalkit.verify_conditions(
        conditions, j_hat, tag, exp.scenario, exp.sim, spec, seed
    )
    rec_path.parent.mkdir(parents=True, exist_ok=True)
    with rec_path.open("w") as fh:
        fh.write(json.dumps({"schema": RECORDS_SCHEMA, "scenario": exp.kind,
                             "method": method, "variant": variant, "seed": seed}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")
    return rec_path


def read_records(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing records file {path} (run verify first)")
    with path.open() as fh:
        fh.readline()
        return [evalkit.VerificationRecord.from_dict(json.loads(l))
                for l in fh if l.strip()]


def cmd_verify_and_report(cfg: dict, force: bool = False):
    """Verify every persisted search output, then emit the consolidated
    report (metric tables, diversity, efficiency, bound audit)."""
    for kind in _scenarios_of(cfg):
        exp = Experiment(cfg, kind)
        for method in SEARCH_METHODS:
            for seed in cfg["seeds"]:
                if exp.search_path(method, seed).exists():
                    verify_search_output(exp, method, seed, force=force)
        if kind == cfg["ablation"]["scenario"]:
            for variant in cfg["ablation"]["variants"]:
                if variant == "full":
                    continue
                for seed in cfg["seeds"]:
                    if exp.search_path("guided", seed, variant).exists():
                        verify_search_output(exp, "guided", seed, variant, force=force)
    cmd_report(cfg)


def cmd_report(cfg: dict) -> dict:
    """Aggregate persisted records into the final tables (pure aggregation;
    regenerating from the same records is byte-stable)."""
    ks = cfg["metrics_ks"]
    summary = {"scenarios": {}, "ablation": {}, "efficiency": {}, "diversity": {}}
    for kind in _scenarios_of(cfg):
        exp = Experiment(cfg, kind)
        table = {}
        for method in SEARCH_METHODS:
            rows, effs = [], []
            for seed in cfg["seeds"]:
                rec_path = exp.records_path(method, seed)
                if not rec_path.exists():
                    continue
                records = read_records(rec_path)
                rows.append(evalkit.metric_row(records, ks))
                meta_path = exp.search_meta_path(method, seed)
                if meta_path.exists():
                    meta = json.loads(meta_path.read_text())
                    effs.append({"wall_clock_s": meta["wall_clock_s"],
                                 "surrogate_queries": meta["surrogate_queries"]})
            if rows:
                table[method] = {"per_seed": rows, "summary": evalkit.aggregate_rows(rows)}
                if effs:
                    table[method]["efficiency"] = evalkit.aggregate_rows(effs)
        summary["scenarios"][kind] = table

        # diversity: severity histogram entropy per searcher on this scenario
        div = {}
        for method in SEARCH_METHODS:
            ents = []
            for seed in cfg["seeds"]:
                rec_path = exp.records_path(method, seed)
                if rec_path.exists():
                    ents.append(
                        evalkit.diversity_histogram(read_records(rec_path))["entropy"]
                    )
            if ents:
                div[method] = {"entropy_mean": float(np.mean(ents)),
                               "entropy_per_seed": ents}
        summary["diversity"][kind] = div

    abl_kind = cfg["ablation"]["scenario"]
    if abl_kind in _scenarios_of(cfg):
        exp = Experiment(cfg, abl_kind)
        for variant in cfg["ablation"]["variants"]:
            rows = []
            for seed in cfg["seeds"]:
                rec_path = exp.records_path("guided", seed, variant)
                if rec_path.exists():
                    rows.append(evalkit.metric_row(read_records(rec_path), ks))
            if rows:
                summary["ablation"][variant] = {
                    "per_seed": rows, "summary": evalkit.aggregate_rows(rows)
                }

    out = Path(cfg["out_dir"]) / "report"
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metrics.json").open("w") as fh:
        json.dump(summary, fh, indent=2, default=float)
        fh.write("\n")
    text = render_report(cfg, summary)
    (out / "report.txt").write_text(text)
    print(text)
    return summary


def render_report(cfg: dict, summary: dict) -> str:
    lines = ["conflict-condition search results", "=" * 60]
    ks = cfg["metrics_ks"]
    for kind, table in summary["scenarios"].items():
        lines.append(f"\nscenario: {kind}")
        header = "method  " + "  ".join(f"TPR@{k:<3d}" for k in ks) + "  spearman"
        lines.append(header)
        for method, entry in table.items():
            s = entry["summary"]
            cells = []
            for k in ks:
                key = f"tpr@{k}"
                if key in s:
                    cells.append(f"{100*s[key]['mean']:5.1f}±{100*s[key]['std']:4.1f}")
                else:
                    cells.append("   n/a  ")
            rho = s.get("spearman")
            rho_txt = f"{rho['mean']:.2f}±{rho['std']:.2f}" if rho else "  n/a"
            lines.append(f"{method:7s} " + "  ".join(cells) + f"  {rho_txt}")
        div = summary["diversity"].get(kind, {})
        if div:
            div_txt = ", ".join(f"{m}={v['entropy_mean']:.2f}" for m, v in div.items())
            lines.append(f"severity-entropy: {div_txt}")
    if summary["ablation"]:
        lines.append("\nablation (guided variants, scenario "
                     f"{cfg['ablation']['scenario']}):")
        for variant, entry in summary["ablation"].items():
            s = entry["summary"]
            tpr = s.get("tpr@10")
            txt = f"{100*tpr['mean']:5.1f}±{100*tpr['std']:4.1f}" if tpr else "n/a"
            lines.append(f"  {variant:12s} TPR@10 {txt}")
    return "\n".join(lines) + "\n"


def cmd_bound_audit(cfg: dict, methods=("guided",), force: bool = False) -> dict:
    """Estimate constants, evaluate per-condition radii/bounds on the
    verified records, and emit the audit summary."""
    out = {}
    for kind in _scenarios_of(cfg):
        exp = Experiment(cfg, kind)
        models = exp.load_models()
        datasets = exp.load_datasets()
        spec = exp.conflict_spec()
        const_path = exp.constants_path()
        if const_path.exists() and not force:
            est = theory.ConstantEstimates.from_dict(json.loads(const_path.read_text()))
        else:
            est = theory.estimate_constants(
                exp.sim, exp.scenario, spec, models.pol_a, models.pol_b,
                models.dyn, datasets, exp.layout, seed=17,
            )
            const_path.write_text(json.dumps(est.to_dict(), indent=2) + "\n")
        roller = baselines.SurrogateRollout(models, exp.sim, spec, exp.kind)
        reports = []
        for method in methods:
            for seed in cfg["seeds"]:
                rec_path = exp.records_path(method, seed)
                if not rec_path.exists():
                    continue
                records = read_records(rec_path)
                for rec in records:
                    u = datafiles.condition_from_dict(rec.condition, exp.sim)
                    rep = bound_report_for(u, roller, est, spec, exp, rec.j_true)
                    reports.append(rep)
                bounds_path = exp.bounds_path(method, seed)
                bounds_path.parent.mkdir(parents=True, exist_ok=True)
        audit = theory.lcb_audit(reports, exp.sim.horizon, est.delta_cal)
        audit["constants"] = est.to_dict()
        out[kind] = audit
        path = Path(cfg["out_dir"]) / "report" / f"lcb_audit_{kind}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(audit, indent=2, default=float) + "\n")
        print(f"[audit] {kind}: {audit['satisfied_fraction']:.3f} of {audit['n']} "
              f"satisfy the LCB ({audit['n_violations']} violations)")
    return out


def bound_report_for(u, roller: baselines.SurrogateRollout, est, spec,
                     exp: Experiment, j_true: float):
    from .conflict import phi_step

    inputs = baselines.condition_to_rollout_inputs(u, exp.sim)
    out = roller.run(*inputs, uncertainties=True)
    u_dyn = out["u_dyn"][0]
    u_pi = out["u_pi"][0]
    j_audit = 0.0
    for t, (cat_a, cat_b) in enumerate(out["hard_actions"]):
        a_a = _cats_to_action(cat_a[0], roller.scenario, "A", exp.sim)
        a_b = _cats_to_action(cat_b[0], roller.scenario, "B", exp.sim)
        j_audit += phi_step(None, a_a, a_b, spec)
    return theory.radius_and_bounds(u_dyn, u_pi, est, float(j_audit), j_true)


def _cats_to_action(cats, scenario_kind, role, sim):
    from .scenarios import action_kinds

    kind = action_kinds(scenario_kind)[0 if role == "A" else 1]
    if kind == "assoc":
        return np.where(cats == sim.n_bs, -1, cats)
    return cats


def cmd_efficiency(cfg: dict, force: bool = False) -> dict:
    """Budget-parity efficiency comparison: CEM re-run with the guided
    searcher's measured forward-equivalent query budget, per scenario."""
    out_path = Path(cfg["out_dir"]) / "report" / "efficiency.json"
    if out_path.exists() and not force:
        return json.loads(out_path.read_text())
    rows = {}
    for kind in _scenarios_of(cfg):
        exp = Experiment(cfg, kind)
        seed = cfg["seeds"][0]
        meta_path = exp.search_meta_path("guided", seed)
        if not meta_path.exists():
            continue
        meta = json.loads(meta_path.read_text())
        budget = meta["surrogate_queries"]
        models = exp.load_models()
        spec = exp.conflict_spec(calibrated=False)
        # match the budget: one rollout = T steps x 3 models (forward only)
        per_rollout = exp.sim.horizon * 3
        s = cfg["searchers"]["cem"]
        gens = s["generations"]
        pop = max(8, int(round(budget / per_rollout / gens)))
        surrogate.QUERIES.reset()
        res = baselines.cem_search(models, exp.sim, spec, exp.kind, seed,
                                   pop=pop, generations=gens,
                                   elite_frac=s["elite_frac"])
        rows[kind] = {
            "guided_wall_clock_s": meta["wall_clock_s"],
            "guided_queries": budget,
            "cem_parity_pop": pop,
            "cem_parity_wall_clock_s": res.wall_clock_s,
            "cem_parity_queries": surrogate.QUERIES.units,
        }
        print(f"[efficiency] {kind}: guided {meta['wall_clock_s']:.1f}s vs "
              f"cem-parity {res.wall_clock_s:.1f}s (pop={pop})")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(rows, indent=2, default=float) + "\n")
    return rows


def cmd_reproduce_all(cfg: dict):
    """End-to-end driver: collect, train, search (all methods and ablation
    variants), verify, bound-audit, efficiency, report. Completed stages are
    skipped, so the driver is restartable."""
    t0 = time.perf_counter()
    cmd_collect(cfg)
    cmd_train(cfg, "surrogate")
    cmd_train(cfg, "diffusion")
    for method in SEARCH_METHODS:
        cmd_search(cfg, method)
    abl = cfg["ablation"]
    if abl["scenario"] in _scenarios_of(cfg):
        for variant in abl["variants"]:
            if variant == "full":
                continue
            cmd_search(cfg, "guided", variant=variant)
    cmd_verify_and_report(cfg)
    cmd_efficiency(cfg)
    cmd_bound_audit(cfg)
    dt = time.perf_counter() - t0
    stamp = {"wall_clock_s": dt}
    (Path(cfg["out_dir"]) / "report" / "runtime.json").write_text(
        json.dumps(stamp) + "\n"
    )
    print(f"[reproduce-all] finished in {dt/60:.1f} min")


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------

def _add_config_arg(p):
    p.add_argument("--config", help="path to an experiment config JSON")
    p.add_argument("--scenario", default=None,
                   help="scenario (direct|indirect|implicit|all) when no config given")
    p.add_argument("--out", default="runs/exp", help="output directory for a fresh config")


def _resolve_config(args) -> dict:
    if args.config:
        return load_config(args.config)
    cfg = default_config(args.scenario or "all", args.out)
    path = Path(cfg["out_dir"]) / "config.json"
    if path.exists():
        return load_config(path)
    save_config(cfg, path)
    print(f"[config] wrote default config to {path}")
    return cfg


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="conflictlab",
        description="Discover conflict-inducing conditions for network-control policy pairs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("collect", "verify", "report", "bound-audit", "efficiency", "reproduce-all"):
        p = sub.add_parser(name)
        _add_config_arg(p)
        if name in ("collect", "verify", "bound-audit", "efficiency"):
            p.add_argument("--force", action="store_true")

    p = sub.add_parser("train")
    _add_config_arg(p)
    p.add_argument("--stage", choices=["surrogate", "diffusion"], required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("search")
    _add_config_arg(p)
    p.add_argument("--method", choices=list(SEARCH_METHODS), required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default="full")
    p.add_argument("--force", action="store_true")

    args = parser.parse_args(argv)
    cfg = _resolve_config(args)

    if args.command == "collect":
        cmd_collect(cfg, force=args.force)
    elif args.command == "train":
        cmd_train(cfg, args.stage, force=args.force)
    elif args.command == "search":
        seeds = [args.seed] if args.seed is not None else None
        cmd_search(cfg, args.method, seeds=seeds, variant=args.variant,
                   force=args.force)
    elif args.command == "verify":
        cmd_verify_and_report(cfg, force=args.force)
    elif args.command == "report":
        cmd_report(cfg)
    elif args.command == "bound-audit":
        cmd_bound_audit(cfg, force=args.force)
    elif args.command == "efficiency":
        cmd_efficiency(cfg, force=args.force)
    elif args.command == "reproduce-all":
        cmd_reproduce_all(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
