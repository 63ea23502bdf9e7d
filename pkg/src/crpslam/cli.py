"""Command line: gen-data, train, forecast, evaluate, selftest.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import forecast as fc
from . import io, net
from .errors import ConfigError, DataError, DimensionError, EstimatorError, NumericError

log = logging.getLogger("crpslam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def resolve_seed(cli_seed: int | None, default: int = 0) -> int:
    env = os.environ.get("CRPSLAM_SEED")
    if env is not None and env.strip():
        try:
            return int(env, 0)
        except ValueError as exc:
            raise ConfigError(f"CRPSLAM_SEED={env!r} is not an integer") from exc
    return default if cli_seed is None else cli_seed


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def _config_values(path) -> dict[str, str]:
    if path is None:
        return {}
    if not Path(path).exists():
        raise ConfigError(f"config file {path} not found")
    return io.read_config(path)


# commands ------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .toy_atmos import ToyDynamicsConfig, make_dataset

    values = _config_values(args.config)
    cfg = io.coerce_dataclass(ToyDynamicsConfig, values)
    counts = {k: int(values.get(k, d)) for k, d in (("n_train", 200), ("n_val", 20), ("n_test", 20))}
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists and is not empty (use --force)")
    t0 = time.perf_counter()
    ds = make_dataset(cfg, seed=seed, **counts)
    io.save_dataset(ds, out, force=args.force)
    print(f"wrote {sum(counts.values())} trajectories to {out} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def _train_configs(values: dict[str, str], seed: int | None):
    from .trainer import TrainConfig

    fvals = {k: v for k, v in values.items() if k in {f.name for f in fields(net.ForecasterConfig)}}
    tvals = {k: v for k, v in values.items() if k in {f.name for f in fields(TrainConfig)} and k != "stages"}
    unknown = set(values) - set(fvals) - set(tvals) - {"stages"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    fcfg = io.coerce_dataclass(net.ForecasterConfig, fvals)
    tcfg = io.coerce_dataclass(TrainConfig, tvals)
    if "stages" in values:
        tcfg = replace(tcfg, stages=io.parse_stages(values["stages"]))
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    return fcfg, tcfg


def cmd_train(args) -> int:
    from .trainer import train

    out = Path(args.out)
    ds = io.load_dataset(args.data)
    did = io.dataset_id(args.data)
    domain = ds.domain
    if args.resume:
        if not (out / "state.txt").exists():
            raise DataError(f"{out} holds no training state to resume")
        state, fcfg, tcfg, meta = io.load_train_state(out)
        if meta.get("dataset_id") and meta["dataset_id"] != did:
            raise DataError("checkpoint was trained on a different dataset")
    else:
        if out.exists() and any(out.iterdir()) and not args.force:
            raise FileExistsError(f"{out} exists and is not empty (use --force or --resume)")
        env_seed = resolve_seed(args.seed, default=-1)
        fcfg, tcfg = _train_configs(_config_values(args.config), None if env_seed < 0 else env_seed)
        if args.full_schedule:
            tcfg = tcfg.with_full_schedule()
        state = None
        io._clean_dir(out, force=True)
    try:
        fcfg.check_domain(domain)
    except ConfigError as exc:
        raise DataError(f"dataset grid incompatible with the model: {exc}") from exc
    if domain.n_input_channels != 5 * domain.d_x + 3 * domain.d_f + domain.d_s + 1:
        raise DataError("dataset channel layout does not match the model")

    def on_epoch_end(st, cfg):
        row = st.log[-1]
        print(f"epoch {row['epoch']:4d} stage {row['stage']} loss {row['train_loss']:.4f} "
              f"val_crps {row['val_crps']:.4f} spread {row['val_spread']:.4f} {row['event']}".rstrip(),
              flush=True)
        io.save_train_state(out, st, fcfg, cfg, did)

    t0 = time.perf_counter()
    state = train(ds.normalized("train"), ds.normalized("val"), domain, fcfg, tcfg, state=state,
                  stop_after=args.epochs, on_epoch_end=on_epoch_end)
    io.save_train_state(out, state, fcfg, tcfg, did)
    print(f"trained to epoch {state.epoch} of {tcfg.total_epochs} in {time.perf_counter() - t0:.1f}s; "
          f"best val CRPS {state.best_val:.4f}")
    return EXIT_OK


def _resolve_ckpt(path) -> Path:
    p = Path(path)
    if (p / "manifest.txt").exists():
        return p
    for name in ("best.ckpt", "last.ckpt"):
        if (p / name / "manifest.txt").exists():
            return p / name
    raise DataError(f"{p} is not a checkpoint")


def cmd_forecast(args) -> int:
    ckpt = _resolve_ckpt(args.ckpt)
    params, meta = io.load_params(ckpt)
    fcfg = io.model_config_from_meta(meta)
    ds = io.load_dataset(args.data)
    domain = ds.domain
    try:
        fcfg.check_domain(domain)
        expected = net.param_shapes(fcfg, domain)
    except ConfigError as exc:
        raise DataError(str(exc)) from exc
    if {k: v.shape for k, v in params.items()} != expected:
        raise DataError("checkpoint parameter shapes do not match the dataset domain")
    if args.split not in ds.splits:
        raise DataError(f"unknown split {args.split!r}")
    trajs = ds.normalized(args.split)
    if args.cases is not None:
        trajs = trajs[: args.cases]
    if not trajs:
        raise DataError("no trajectories to forecast")
    if args.t0 < 1 or args.t0 + args.lead_steps >= trajs[0].length:
        raise DataError(
            f"lead of {args.lead_steps} steps from t={args.t0} exceeds trajectory length {trajs[0].length}"
        )
    if args.members < 1:
        raise ConfigError("--members must be at least 1")
    seed = resolve_seed(args.seed)
    provenance = {"checkpoint_id": meta["checkpoint_id"], "dataset_id": io.dataset_id(args.data),
                  "seed": str(seed)}
    t0 = time.perf_counter()
    out = fc.forecast_split(params, trajs, ds.stats, domain, fcfg, args.members, args.lead_steps, seed,
                            args.noise_mode, args.t0, args.split, provenance)
    elapsed = time.perf_counter() - t0
    io.save_forecast(args.out, out, force=True)
    per_member = elapsed / (len(trajs) * args.members)
    print(f"forecast {len(trajs)} cases x {args.members} members x {args.lead_steps} steps "
          f"in {elapsed:.2f}s ({per_member * 1e3:.1f} ms per member trajectory)")
    _throughput_report(params, trajs[0], domain, fcfg, min(args.members, 8), args.t0, ds)
    return EXIT_OK


def _throughput_report(params, traj, domain, fcfg, n, t0, ds) -> None:
    """Informational: one batched step vs ``n`` single-member steps."""
    from .domain import build_window

    w = build_window(domain, traj, t0)
    z = [net.sample_noise(0, m, 0, fcfg.d_z) for m in range(n)]
    p = net.as_tensors(params)
    tic = time.perf_counter()
    net.forward_ensemble(w, z, p, domain, fcfg)
    batched = time.perf_counter() - tic
    tic = time.perf_counter()
    for zz in z:
        net.forward(w, zz, p, domain, fcfg)
    sequential = time.perf_counter() - tic
    print(f"throughput (informational): batched {n / batched:.1f} members/s, "
          f"sequential {n / sequential:.1f} members/s")


def _csv_value(v: float) -> str:
    if math.isinf(v):
        return "+inf" if v > 0 else "-inf"
    return repr(float(v))


def metric_csv(rows) -> str:
    return "variable,lead,value\n" + "".join(f"{d},{lead},{_csv_value(v)}\n" for d, lead, v in rows)


def spectrum_csv(spec) -> str:
    return "wavenumber,energy,count\n" + "".join(
        f"{int(k)},{float(e)!r},{int(c)}\n" for k, e, c in zip(spec.wavenumber, spec.energy, spec.count)
    )


def read_metric_csv(path) -> list[tuple[int, int, float]]:
    lines = Path(path).read_text().splitlines()
    if lines[0] != "variable,lead,value":
        raise DataError(f"{path}: unexpected header {lines[0]!r}")
    out = []
    for line in lines[1:]:
        d, lead, v = line.split(",")
        out.append((int(d), int(lead), float(v)))
    return out


def read_spectrum_csv(path):
    from .spectra import EnergySpectrum

    lines = Path(path).read_text().splitlines()
    if lines[0] != "wavenumber,energy,count":
        raise DataError(f"{path}: unexpected header {lines[0]!r}")
    rows = [line.split(",") for line in lines[1:]]
    return EnergySpectrum(
        np.array([int(r[0]) for r in rows]), np.array([float(r[1]) for r in rows]),
        np.array([int(r[2]) for r in rows]),
    )


def spectrum_name(lead: int, variable: int, source: str) -> str:
    return f"spectrum_lead{lead:02d}_var{variable}_{source}.csv"


def cmd_evaluate(args) -> int:
    from .plots import line_plot_svg

    forecast = io.load_forecast(args.forecast)
    ds = io.load_dataset(args.data)
    did = io.dataset_id(args.data)
    expected = forecast.provenance.get("dataset_id")
    if expected and expected != did:
        raise DataError(f"forecast was made on dataset {expected}, not {did}")
    if forecast.split not in ds.splits:
        raise DataError(f"dataset has no split {forecast.split!r}")
    domain = ds.domain
    if forecast.members.shape[3:] != (domain.d_x, domain.interior_height, domain.interior_width):
        raise DataError("forecast shape does not match the dataset domain")
    truth = fc.truth_for(forecast, ds.splits[forecast.split], domain)
    table = fc.evaluate(forecast.members, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hours = forecast.lead_hours()
    for name in ("rmse", "crps", "ssr"):
        rows = table.rows(name)
        if not rows:
            continue
        io.write_text(out / f"{name}.csv", metric_csv(rows))
        series = {}
        for d in range(domain.d_x):
            ys = [v for dd, _, v in rows if dd == d]
            series[f"var {d}"] = (list(hours), ys)
        io.write_text(out / f"{name}.svg", line_plot_svg(series, name.upper(), "lead time (h)", name))
    for (lead, d, source), spec in sorted(table.spectra.items()):
        io.write_text(out / spectrum_name(lead, d, source), spectrum_csv(spec))
    leads = sorted({k[0] for k in table.spectra})
    for d in range(domain.d_x):
        series = {}
        for lead in leads:
            for source in ("forecast", "truth"):
                spec = table.spectra[(lead, d, source)]
                series[f"{source} {lead * forecast.dt_hours:g}h"] = (list(spec.wavenumber), list(spec.energy))
        io.write_text(out / f"spectra_var{d}.svg",
                      line_plot_svg(series, f"energy spectra, variable {d}", "wavenumber", "energy", logy=True))
    for name in ("rmse", "crps", "ssr"):
        arr = getattr(table, name)
        if arr is not None:
            print(f"{name}: lead 1 {np.array2string(arr[:, 0], precision=4)}, "
                  f"lead {forecast.lead_steps} {np.array2string(arr[:, -1], precision=4)}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    checks = run_all(quick=args.quick)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crpslam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--config", help="key=value file (dynamics fields, n_train, n_val, n_test)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=_u64, default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the forecaster")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key=value file (model and training fields)")
    t.add_argument("--out", required=True)
    t.add_argument("--full-schedule", action="store_true", help="use the 600/400/200 epoch stages")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--epochs", type=int, default=None, help="stop after this many total epochs")
    t.add_argument("--seed", type=_u64, default=None)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="roll out an ensemble forecast")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--members", type=int, default=25)
    f.add_argument("--lead-steps", type=int, default=19)
    f.add_argument("--seed", type=_u64, default=None)
    f.add_argument("--out", required=True)
    f.add_argument("--noise-mode", choices=fc.NOISE_MODES, default="per-step")
    f.add_argument("--split", default="test")
    f.add_argument("--cases", type=int, default=None)
    f.add_argument("--t0", type=int, default=1)
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="score a forecast archive")
    e.add_argument("--forecast", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("selftest", help="run the oracle suite")
    s.add_argument("--quick", action="store_true")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, EstimatorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, FileExistsError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
