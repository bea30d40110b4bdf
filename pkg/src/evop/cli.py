"""Command-line interface: ``evop generate|train|evaluate|spectrum|interpret``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical error. The default thread count for BLAS comes from
``EVOP_THREADS`` and can be overridden with ``--threads``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .config import PRESETS, RunConfig, load_config
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .exceptions import ConfigError, EvopError
from .interpret import (build_descriptors, default_lambdas, lasso_path, write_coefficients_json,
                        write_path_csv)
from .objective import vamp2_score
from .operator import batch_covariances, load_operator, save_operator
from .spectral import (AffineFeatures, eig, eigenfunction_eval, filter_spectrum, forecast_state,
                       linls_baseline, read_eigenfunction_csv, rmse, write_eigenfunction_csv,
                       write_spectrum_csv)
from .training import TrainingAborted, finalize_operator, load_state, train

logger = logging.getLogger("evop")

THREADS_ENV = "EVOP_THREADS"
SPLIT_NAMES = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ext(fmt):
    return "csv" if fmt == "csv" else "bin"


def _mkdir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["dynamics.seed"] = args.seed
        overrides["training.seed"] = args.seed
    return load_config(args.config, preset=args.preset, overrides=overrides)


# ------------------------------------------------------------------ generate

def generate_trajectory(cfg: RunConfig) -> dyn.Trajectory:
    d = cfg.dynamics
    if d.system == "lorenz63":
        x0 = d.x0 if d.x0 is not None else (1.0, 1.0, 1.0)
        return dyn.lorenz63_trajectory(d.n_steps, d.dt, x0, seed=d.seed, jitter=d.jitter,
                                       substeps=d.substeps, **d.params)
    if d.system == "ou":
        x0 = 0.0 if d.x0 is None else float(d.x0)
        return dyn.ou_trajectory(d.n_steps, d.dt, x0=x0, seed=d.seed, **d.params)
    T = d.params.get("transition_matrix")
    if T is None:
        raise ConfigError("dynamics.params.transition_matrix is required for the markov system")
    x0 = None if d.x0 is None else int(d.x0)
    return dyn.markov_chain_trajectory(T, d.n_steps, seed=d.seed, x0=x0)


def cmd_generate(args, cfg: RunConfig):
    out = _mkdir(args.out)
    d = cfg.dynamics
    traj = generate_trajectory(cfg)
    splits = dyn.split_with_gaps(traj, d.burn_in, d.splits, d.gap)
    ext = _ext(d.format)
    dyn.save_trajectory(traj, out / f"trajectory.{ext}", d.format)
    for name, seg in zip(SPLIT_NAMES, splits):
        dyn.save_trajectory(seg, out / f"{name}.{ext}", d.format)
    manifest = dict(
        config=cfg.to_dict(),
        meta=traj.meta,
        dt=traj.dt,
        dim=traj.dim,
        format=d.format,
        files=dict(trajectory=f"trajectory.{ext}", **{n: f"{n}.{ext}" for n in SPLIT_NAMES}),
        splits={n: [int(s.start), int(s.start + len(s))] for n, s in zip(SPLIT_NAMES, splits)},
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(traj)}-step trajectory and {len(splits)} splits to {out}")


# ------------------------------------------------------------------ data helpers

def _read_manifest(data_dir: Path) -> dict:
    mf = data_dir / "manifest.json"
    if not mf.exists():
        raise UsageError(f"{data_dir} has no manifest.json; run 'evop generate' first or pass a file")
    return json.loads(mf.read_text())


def load_split(data, name: str, dt: float | None = None) -> dyn.Trajectory:
    """Load split ``name`` from a generate directory, or ``data`` itself if it is a file."""
    data = Path(data)
    if data.is_dir():
        mf = _read_manifest(data)
        return dyn.load_trajectory(data / mf["files"][name], mf["format"], dt=mf["dt"])
    if not data.exists():
        raise UsageError(f"data path {data} does not exist")
    return dyn.load_trajectory(data, dt=dt or 1.0)


def _pairs(traj, cfg: RunConfig):
    return dyn.make_pairs(traj, cfg.operator.lag, cfg.operator.history)


# ------------------------------------------------------------------ train

def encoder_config_for(cfg: RunConfig, pairs) -> EncoderConfig:
    e = cfg.encoder
    mean = scale = None
    if e.standardize:
        X = pairs.x
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    return EncoderConfig(pairs.dim, e.hidden_dims, e.latent_dim, e.activation, e.append_raw_state,
                         e.simnorm_group, cfg.training.seed, mean, scale)


def cmd_train(args, cfg: RunConfig):
    if args.data is None:
        raise UsageError("train needs --data (a directory written by 'evop generate')")
    out = _mkdir(args.out)
    train_traj = load_split(args.data, "train")
    val_traj = load_split(args.data, "val")
    pairs, val_pairs = _pairs(train_traj, cfg), _pairs(val_traj, cfg)
    tc = cfg.training
    state = None
    metrics = out / "metrics.jsonl"
    if args.resume:
        state, _ = load_state(args.resume)
        enc_cfg = state.encoder.config
        logger.info("resuming from %s at epoch %d", args.resume, state.epoch)
    else:
        enc_cfg = encoder_config_for(cfg, pairs)
        if metrics.exists():
            metrics.unlink()
    ckpt = out / "checkpoint.json"
    try:
        state, report = train(enc_cfg, pairs, val_pairs, tc, state=state, metrics_path=metrics,
                              checkpoint_path=ckpt)
    except TrainingAborted as exc:
        raise EvopError(f"training aborted: {exc}; last good checkpoint kept at {ckpt}") from exc
    model = finalize_operator(state.buffers, cfg.operator.ridge, cfg.operator.mode, pairs, state.encoder,
                              lag_time=pairs.dt_effective)
    save_operator(out / "operator.json", model)
    if state.best is not None:
        _, vs, enc, P, buf = state.best
        save_checkpoint(out / "best.json", enc, P, buf, dict(epoch=state.best[0], val_vamp2=vs))
    summary = dict(
        epochs=state.epoch,
        final_train_loss=report.train_loss[-1] if report.train_loss else None,
        final_val_vamp2=report.val_vamp2[-1] if report.val_vamp2 else None,
        best_epoch=report.best_epoch,
        best_val_vamp2=report.best_val_vamp2,
        operator_dim=model.dim,
        operator_source=model.source,
        ridge=model.ridge,
        lag_time=model.lag_time,
        wall_time=report.wall_time[-1] if report.wall_time else 0.0,
    )
    (out / "train_report.json").write_text(json.dumps(summary, indent=2))
    if args.figures and report.train_loss:
        from .plotting import training_figure
        training_figure(out / "training.png", report)
    print(f"trained {state.epoch} epochs; operator d={model.dim} written to {out / 'operator.json'}")


# ------------------------------------------------------------------ evaluate

def _features(checkpoint, dim):
    if checkpoint:
        enc, _, _, _ = load_checkpoint(checkpoint)
        return enc
    return AffineFeatures(dim)


def cmd_evaluate(args, cfg: RunConfig):
    if args.data is None:
        raise UsageError("evaluate needs --data")
    out = _mkdir(args.out)
    test = load_split(args.data, "test")
    pairs = _pairs(test, cfg)
    result = dict(n_test_pairs=len(pairs))
    if args.operator:
        model = load_operator(args.operator)
        feats = _features(args.checkpoint, pairs.dim)
        if getattr(getattr(feats, "config", None), "append_raw_state", True):
            agg, per = rmse(forecast_state(model, feats, pairs.x), pairs.y)
            result.update(rmse=agg, rmse_per_component=per.tolist())
        else:
            logger.info("encoder has no raw-state passthrough; skipping the state forecast")
        Zx, Zy = feats(pairs.x), feats(pairs.y)
        C_X, C_Y, C_XY = batch_covariances(Zx, Zy)
        result["vamp2"] = vamp2_score(C_X, C_XY, C_Y, cfg.training.vamp_reg)
    if args.baseline:
        if args.train_data is not None:
            train_traj = load_split(args.train_data, "train")
        elif Path(args.data).is_dir():
            train_traj = load_split(args.data, "train")
        else:
            raise UsageError("--baseline needs training data: pass a generate directory or --train-data")
        lm, lf = linls_baseline(_pairs(train_traj, cfg), cfg.operator.ridge)
        agg, per = rmse(forecast_state(lm, lf, pairs.x), pairs.y)
        result.update(linls_rmse=agg, linls_rmse_per_component=per.tolist())
        if "rmse" in result:
            result["rmse_ratio"] = result["rmse"] / agg if agg > 0 else None
    if len(result) == 1:
        raise UsageError("nothing to evaluate: pass --operator and/or --baseline")
    (out / "metrics.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result))


# ------------------------------------------------------------------ spectrum

def cmd_spectrum(args, cfg: RunConfig):
    if args.operator is None:
        raise UsageError("spectrum needs --operator")
    out = _mkdir(args.out)
    model = load_operator(args.operator)
    decomp = eig(model)
    thr = cfg.spectral.min_decorrelation if args.min_decorrelation is None else args.min_decorrelation
    decomp = filter_spectrum(decomp, thr)
    write_spectrum_csv(out / "spectrum.csv", decomp)
    n_modes = min(cfg.spectral.n_modes if args.n_modes is None else args.n_modes, len(decomp))
    if args.figures:
        from .plotting import spectrum_figure
        spectrum_figure(out / "spectrum.png", decomp.eigenvalues)
    if args.data is not None:
        if args.checkpoint is None:
            raise UsageError("eigenfunction export needs --checkpoint together with --data")
        enc, _, _, _ = load_checkpoint(args.checkpoint)
        traj = load_split(args.data, "test")
        H = cfg.operator.history
        idx = np.arange(len(traj) - H)
        X = dyn.PairDataset(traj.states, idx, idx, history=H).x
        Z = enc(X)
        for k in range(n_modes):
            psi = eigenfunction_eval(decomp, k, Z)
            write_eigenfunction_csv(out / f"eigenfunction_{k + 1}.csv", idx, psi)
            if args.figures:
                from .plotting import eigenfunction_figure
                eigenfunction_figure(out / f"eigenfunction_{k + 1}.png", traj.states[idx], psi, str(k + 1))
    print(f"wrote spectrum with {len(decomp)} modes to {out / 'spectrum.csv'}")


# ------------------------------------------------------------------ interpret

def _select_lambda(path):
    # sparsest point whose MSE is within 5% of the path's MSE range from the minimum
    lo, hi = path.mse.min(), path.mse.max()
    ok = np.flatnonzero(path.mse <= lo + 0.05 * (hi - lo))
    return float(path.lambdas[ok[0]])


def cmd_interpret(args, cfg: RunConfig):
    if args.eigenfunction is None or args.data is None:
        raise UsageError("interpret needs --eigenfunction and --data")
    out = _mkdir(args.out)
    t_idx, psi = read_eigenfunction_csv(args.eigenfunction)
    traj = load_split(args.data, "test")
    if t_idx.max() >= len(traj):
        raise UsageError(f"eigenfunction time index {t_idx.max()} exceeds trajectory length {len(traj)}")
    ic = cfg.interpret
    target = np.abs(psi) if ic.target == "modulus" else psi.real
    lib = build_descriptors(traj.states[t_idx], ic.descriptors)
    tc = target - target.mean()
    lambdas = default_lambdas(lib.D, tc, ic.n_lambdas, ic.lambda_min_ratio)
    path = lasso_path(lib, target, lambdas)
    write_path_csv(path, out / "lasso_path.csv")
    lam = _select_lambda(path)
    write_coefficients_json(out / "coefficients.json", path, lam)
    if args.figures:
        from .plotting import lasso_path_figure
        lasso_path_figure(out / "lasso_path.png", path)
    print(f"wrote LASSO path ({len(path.lambdas)} penalties, {lib.n_descriptors} descriptors) to {out}")


# ------------------------------------------------------------------ entry point

COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "spectrum": cmd_spectrum,
    "interpret": cmd_interpret,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (all keys optional)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="preset defaults applied before the config file")
    common.add_argument("--seed", type=int, help="override dynamics.seed and training.seed")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"BLAS thread count (default: ${THREADS_ENV} or library default)")
    common.add_argument("--no-figures", dest="figures", action="store_false",
                        help="skip PNG figures next to the CSV/JSON outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="evop", description="Contrastive evolution-operator learning and spectral analysis.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="simulate a trajectory and write splits")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train encoder and predictor, finalize the operator")
    t.add_argument("--data", help="directory written by 'evop generate'")
    t.add_argument("--resume", help="checkpoint to continue from (epoch numbering continues)")

    e = sub.add_parser("evaluate", parents=[common], help="one-step forecast RMSE and VAMP-2 on test data")
    e.add_argument("--operator", help="operator JSON from 'evop train'")
    e.add_argument("--checkpoint", help="encoder checkpoint (omit for raw-state-plus-intercept features)")
    e.add_argument("--data", help="generate directory (test split) or trajectory file")
    e.add_argument("--train-data", help="training data for the LinLS baseline when --data is a file")
    e.add_argument("--baseline", action="store_true", help="also fit and score the LinLS baseline")

    s = sub.add_parser("spectrum", parents=[common], help="export eigenvalues and eigenfunction series")
    s.add_argument("--operator", help="operator JSON")
    s.add_argument("--checkpoint", help="encoder checkpoint for eigenfunction evaluation")
    s.add_argument("--data", help="generate directory (test split) or trajectory file")
    s.add_argument("--min-decorrelation", type=float, help="drop modes with shorter implied timescale")
    s.add_argument("--n-modes", type=int, help="number of eigenfunction series to export")

    i = sub.add_parser("interpret", parents=[common], help="LASSO regression of an eigenfunction on descriptors")
    i.add_argument("--eigenfunction", help="eigenfunction CSV from 'evop spectrum'")
    i.add_argument("--data", help="the trajectory the eigenfunction was evaluated on")

    for name, parser in (("train", t), ("evaluate", e), ("spectrum", s), ("interpret", i)):
        parser.set_defaults(func=COMMANDS[name])
    return p


def _thread_limit(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        with _thread_limit(args.threads):
            args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"evop {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (EvopError, ValueError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"evop {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
