"""Command-line entry point: generate, train, evaluate, ablate.

Every run writes into an output directory: the effective configuration
(defaults, overridden by an optional ``key=value`` config file, overridden
by flags), datasets and loss curves as CSV, reports and metrics as JSON,
plots as SVG, and checkpoints as JSON containers. All randomness derives
from ``--seed`` (falling back to the ``STIFFKIN_SEED`` environment
variable), so a run is reproducible from its config echo alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as ckio
from . import pipeline, svg
from .kinetics import CrnnParams
from .pipeline import LossWeights, TrainConfig, WindowSpec
from .scheme import MechanismError, bundled_mechanism_text, parse_scheme
from .solver import (
    SolverConfig,
    SolverError,
    Trajectory,
    downsample,
    generate_dataset,
    trajectory_from_csv,
    trajectory_to_csv,
)

_CONFIG_KEYS = {
    "seed": int,
    "learning_rate": float,
    "epochs_stage1": int,
    "epochs_stage2": int,
    "epochs_stage3": int,
    "anneal_patience_fraction": float,
    "anneal_factor": float,
    "interpolation_factor": int,
    "batch_size": int,
    "alpha": float,
    "beta": float,
    "rtol": float,
    "atol": float,
    "window": str,
    "downsample": int,
    "stage": str,
    "init": str,
    "variant": str,
    "data_rtol": float,
}


def _load_scheme(path: str):
    """Resolve a mechanism path; bare names fall back to bundled files."""
    p = Path(path)
    if p.exists():
        return parse_scheme(p.read_text(encoding="utf-8"))
    name = p.stem
    try:
        return parse_scheme(bundled_mechanism_text(name))
    except FileNotFoundError:
        raise FileNotFoundError(f"no mechanism file or bundled scheme {path!r}")


def _read_config_file(path: str) -> dict:
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line must be key=value: {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _CONFIG_KEYS[key](val.strip())
    return values


def _effective(args, file_cfg: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def _default_seed() -> int:
    env = os.environ.get("STIFFKIN_SEED")
    return int(env) if env else 0


def _parse_window(text: str):
    if text in ("auto",):
        return "auto"
    if text in ("none", "full"):
        return None
    size, _, stride = text.partition(",")
    return WindowSpec(int(size), int(stride))


def _train_config(args, file_cfg: dict) -> TrainConfig:
    window = _effective(args, file_cfg, "window", "auto")
    if isinstance(window, str):
        window = _parse_window(window)
    return TrainConfig(
        learning_rate=_effective(args, file_cfg, "learning_rate", 1e-3),
        epochs_stage1=_effective(args, file_cfg, "epochs_stage1", 5000),
        epochs_stage2=_effective(args, file_cfg, "epochs_stage2", 2000),
        epochs_stage3=_effective(args, file_cfg, "epochs_stage3", 2000),
        anneal_patience_fraction=_effective(
            args, file_cfg, "anneal_patience_fraction", 0.10
        ),
        anneal_factor=_effective(args, file_cfg, "anneal_factor", 0.5),
        interpolation_factor=_effective(
            args, file_cfg, "interpolation_factor", 10
        ),
        seed=_effective(args, file_cfg, "seed", _default_seed()),
        weights=LossWeights(
            alpha=_effective(args, file_cfg, "alpha", 0.1),
            beta=_effective(args, file_cfg, "beta", 0.1),
        ),
        window=window,
        batch_size=_effective(args, file_cfg, "batch_size", 32),
        rtol=_effective(args, file_cfg, "rtol", 1e-6),
        atol=_effective(args, file_cfg, "atol", 1e-9),
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, command: str, payload: dict):
    payload = {"command": command, **payload}
    (out / "config.json").write_text(json.dumps(payload, indent=2, default=str))


def _obtain_dataset(args, scheme, file_cfg) -> Trajectory:
    if getattr(args, "data", None):
        traj, _ = trajectory_from_csv(Path(args.data).read_text())
        return traj
    rtol = _effective(args, file_cfg, "data_rtol", 1e-10)
    cfg = SolverConfig.for_dataset(rtol=rtol, atol=rtol * 1e-3)
    return generate_dataset(scheme, cfg)


def _init_params(spec_text: str, scheme, seed: int) -> CrnnParams:
    if spec_text == "random":
        return pipeline.crnn_init_random(scheme, np.random.default_rng(seed + 1))
    if spec_text == "truth":
        return pipeline.crnn_init_truth(scheme)
    if spec_text.startswith("perturbed:"):
        frac = float(spec_text.split(":", 1)[1])
        return pipeline.crnn_init_perturbed(
            scheme, frac, np.random.default_rng(seed + 2)
        )
    if spec_text.startswith("file:"):
        path = spec_text.split(":", 1)[1]
        if path.endswith(".json"):
            payload = ckio.load_checkpoint(path)
            if payload["kind"] != "crnn":
                raise ValueError("checkpoint is not a coefficient checkpoint")
            return payload["params"]
        return ckio.load_coefficient_file(path, scheme)
    raise ValueError(f"unknown --init {spec_text!r}")


def _write_dataset(out: Path, scheme, traj: Trajectory) -> str:
    csv_text = trajectory_to_csv(traj, scheme.species_names)
    (out / "dataset.csv").write_text(csv_text)
    digest = hashlib.sha256(csv_text.encode()).hexdigest()
    meta = {
        "n_times": traj.n_times,
        "n_species": traj.n_species,
        "provenance": traj.provenance,
        "sha256": digest,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2))
    return digest


def cmd_generate(args) -> int:
    file_cfg = _read_config_file(args.config) if args.config else {}
    scheme = _load_scheme(args.scheme)
    out = _out_dir(args)
    rtol = _effective(args, file_cfg, "data_rtol", 1e-10)
    cfg = SolverConfig.for_dataset(rtol=rtol, atol=rtol * 1e-3)
    traj = generate_dataset(scheme, cfg)
    factor = _effective(args, file_cfg, "downsample", 1)
    if factor > 1:
        traj = downsample(traj, factor)
    digest = _write_dataset(out, scheme, traj)
    _echo_config(out, "generate", {
        "scheme": args.scheme,
        "rtol": cfg.rtol,
        "atol": cfg.atol,
        "downsample": factor,
        "sha256": digest,
        "scheme_echo": scheme.species_names,
    })
    print(f"wrote {traj.n_times}x{traj.n_species} dataset, sha256={digest[:16]}")
    return 0


def _write_losses_csv(out: Path, name: str, losses):
    lines = ["epoch,loss"] + [f"{i},{v:.16e}" for i, v in enumerate(losses)]
    (out / name).write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    file_cfg = _read_config_file(args.config) if args.config else {}
    scheme = _load_scheme(args.scheme)
    cfg = _train_config(args, file_cfg)
    out = _out_dir(args)
    stage = _effective(args, file_cfg, "stage", "all")
    init_spec = _effective(args, file_cfg, "init", "random")
    obs = _obtain_dataset(args, scheme, file_cfg)
    factor = _effective(args, file_cfg, "downsample", 1)
    if factor > 1:
        obs = downsample(obs, factor)
    _write_dataset(out, scheme, obs)
    _echo_config(out, "train", {
        "scheme": args.scheme, "stage": stage, "init": init_spec,
        "downsample": factor, **cfg.__dict__,
    })

    stages = [1, 2, 3] if stage == "all" else [int(stage)]
    summary = {}
    transform = "log10" if (
        scheme.time_grid_spec and scheme.time_grid_spec.kind == "log"
    ) else "linear"
    mlp = stats = fitted = None
    crnn = None

    for s in stages:
        if s == 1:
            mlp, stats, report = pipeline.stage1_fit(scheme, obs, cfg)
            fitted = pipeline.mlp_fitted_trajectory(scheme, mlp, stats, obs, cfg)
            ckio.save_mlp_checkpoint(
                out / "stage1_mlp.json", mlp, stats, cfg.seed, transform
            )
            (out / "stage1_fitted.csv").write_text(
                trajectory_to_csv(fitted, scheme.species_names)
            )
        elif s == 2:
            if fitted is None:
                ck = out / "stage1_mlp.json"
                fit_csv = out / "stage1_fitted.csv"
                if fit_csv.exists():
                    fitted, _ = trajectory_from_csv(fit_csv.read_text(), "fitted")
                elif ck.exists():
                    payload = ckio.load_checkpoint(ck)
                    fitted = pipeline.mlp_fitted_trajectory(
                        scheme, payload["params"], payload["stats"], obs, cfg
                    )
                else:
                    raise FileNotFoundError(
                        "stage 2 needs a stage-1 artifact in the output "
                        "directory (run --stage 1 first) or --stage all"
                    )
            crnn, report = pipeline.stage2_pretrain(scheme, fitted, cfg)
            ckio.save_crnn_checkpoint(out / "stage2_crnn.json", crnn, cfg.seed)
        else:
            if crnn is None:
                ck = out / "stage2_crnn.json"
                if init_spec != "random":
                    crnn = _init_params(init_spec, scheme, cfg.seed)
                elif ck.exists():
                    crnn = ckio.load_checkpoint(ck)["params"]
                else:
                    raise FileNotFoundError(
                        "stage 3 needs a stage-2 checkpoint or an explicit "
                        "--init (truth, perturbed:<frac>, file:<path>)"
                    )
            crnn, report = pipeline.stage3_finetune(scheme, obs, crnn, cfg)
            ckio.save_crnn_checkpoint(out / "stage3_crnn.json", crnn, cfg.seed)

        name = f"stage{s}"
        (out / f"report_{name}.json").write_text(
            json.dumps(report.to_dict(), indent=2)
        )
        _write_losses_csv(out, f"losses_{name}.csv", report.losses)
        summary[name] = {
            "best_loss": report.best_loss,
            "final_traj_mse": report.final_traj_mse,
            "coeff_mae": report.coeff_mae,
            "coeff_mae_ln_all": report.coeff_mae_ln_all,
        }
        print(
            f"{name}: best_loss={report.best_loss:.3e}"
            + (f" coeff_mae={report.coeff_mae:.4f}" if report.coeff_mae
               is not None else "")
        )

    losses_all = {}
    for s in stages:
        rp = json.loads((out / f"report_stage{s}.json").read_text())
        losses_all[f"stage{s}"] = rp["losses"]
    (out / "loss_curves.svg").write_text(svg.loss_curve_svg(losses_all))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    if crnn is not None:
        _export_eval(out, scheme, crnn, obs, cfg)
    return 0


def _export_eval(out: Path, scheme, params: CrnnParams, obs, cfg: TrainConfig):
    metrics = pipeline.evaluate(scheme, params, obs, cfg)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    table = pipeline.coefficient_table(scheme, params)
    lines = ["id,truth,estimate,frozen"] + [
        f"{r['id']},{r['truth']:.16e},{r['estimate']:.16e},{int(r['frozen'])}"
        for r in table
    ]
    (out / "coefficients.csv").write_text("\n".join(lines) + "\n")
    (out / "coefficients.svg").write_text(svg.coefficient_scatter_svg(table))
    log_x = scheme.time_grid_spec is not None and scheme.time_grid_spec.kind == "log"
    try:
        from .fields import CrnnField
        from .solver import integrate

        pred = integrate(
            CrnnField(scheme, params.log_k), obs.states[0], obs.times,
            cfg.solver_config(chemical=True),
        )
        (out / "trajectories.svg").write_text(
            svg.trajectory_overlay_svg(
                obs.times, obs.states, pred.states, scheme.species_names,
                log_x=log_x,
            )
        )
        (out / "predicted.csv").write_text(
            trajectory_to_csv(pred, scheme.species_names)
        )
    except SolverError as exc:
        (out / "trajectories.svg").write_text(
            svg.trajectory_overlay_svg(
                obs.times, obs.states, None, scheme.species_names, log_x=log_x
            )
        )
        print(f"trajectory export skipped: {exc}", file=sys.stderr)
    return metrics


def cmd_evaluate(args) -> int:
    file_cfg = _read_config_file(args.config) if args.config else {}
    scheme = _load_scheme(args.scheme)
    cfg = _train_config(args, file_cfg)
    out = _out_dir(args)
    obs = _obtain_dataset(args, scheme, file_cfg)
    if args.checkpoint:
        payload = ckio.load_checkpoint(args.checkpoint)
        if payload["kind"] != "crnn":
            raise ValueError("evaluate expects a coefficient checkpoint")
        params = payload["params"]
    else:
        init_spec = _effective(args, file_cfg, "init", None)
        if not init_spec:
            raise FileNotFoundError(
                "evaluate needs --checkpoint or --init"
            )
        params = _init_params(init_spec, scheme, cfg.seed)
    _echo_config(out, "evaluate", {
        "scheme": args.scheme,
        "checkpoint": args.checkpoint,
        "init": getattr(args, "init", None),
        "seed": cfg.seed,
    })
    metrics = _export_eval(out, scheme, params, obs, cfg)
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_ablate(args) -> int:
    file_cfg = _read_config_file(args.config) if args.config else {}
    scheme = _load_scheme(args.scheme)
    cfg = _train_config(args, file_cfg)
    out = _out_dir(args)
    variant = _effective(args, file_cfg, "variant", None)
    if variant is None:
        raise ValueError("ablate needs --variant")
    obs = _obtain_dataset(args, scheme, file_cfg)
    factor = _effective(args, file_cfg, "downsample", 1)
    if factor > 1:
        obs = downsample(obs, factor)
    _echo_config(out, "ablate", {
        "scheme": args.scheme, "variant": variant, "downsample": factor,
        **cfg.__dict__,
    })
    mlp = mlp_stats = None
    if variant == "mlp_proxy":
        if not args.mlp_checkpoint:
            raise ValueError("mlp_proxy needs --mlp-checkpoint")
        payload = ckio.load_checkpoint(args.mlp_checkpoint)
        mlp, mlp_stats = payload["params"], payload["stats"]
    params, report = pipeline.ablation_run(
        variant, scheme, obs, cfg, mlp=mlp, mlp_stats=mlp_stats
    )
    (out / "report_ablation.json").write_text(
        json.dumps(report.to_dict(), indent=2)
    )
    _write_losses_csv(out, "losses_ablation.csv", report.losses)
    ckio.save_crnn_checkpoint(out / "ablation_crnn.json", params, cfg.seed)
    print(
        f"{variant}: coeff_mae={report.coeff_mae:.4f} "
        f"traj_mse={report.final_traj_mse}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stiffkin",
        description="Rate-coefficient estimation for stiff reaction networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("scheme", help="mechanism file or bundled name")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--data", help="use an existing trajectory CSV")
        p.add_argument("--data-rtol", dest="data_rtol", type=float)
        p.add_argument("--downsample", type=int)

    g = sub.add_parser("generate", help="integrate a scheme into a dataset")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the staged estimation")
    common(t)
    t.add_argument("--stage", choices=["1", "2", "3", "all"])
    t.add_argument("--init", help="random | truth | perturbed:<frac> | file:<path>")
    for key in ("learning_rate", "anneal_patience_fraction", "anneal_factor",
                "alpha", "beta", "rtol", "atol"):
        t.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float)
    for key in ("epochs_stage1", "epochs_stage2", "epochs_stage3",
                "interpolation_factor", "batch_size"):
        t.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    t.add_argument("--window", help='"auto", "none", or "SIZE,STRIDE"')
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics and plots for coefficients")
    common(e)
    e.add_argument("--checkpoint", help="coefficient checkpoint JSON")
    e.add_argument("--init", help="random | truth | perturbed:<frac> | file:<path>")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="stage-2 ablation variants")
    common(a)
    a.add_argument("--variant", choices=list(pipeline.ABLATION_VARIANTS))
    a.add_argument("--mlp-checkpoint", dest="mlp_checkpoint")
    for key in ("learning_rate", "interpolation_factor", "batch_size",
                "epochs_stage2"):
        a.add_argument(f"--{key.replace('_', '-')}", dest=key,
                       type=int if key != "learning_rate" else float)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except (MechanismError, SolverError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"done in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
