"""Reference experiment shared by the acceptance tests (cached on disk)."""

from __future__ import annotations

import os
import time
from pathlib import Path

from crpslam import io, net
from crpslam.toy_atmos import ToyDynamicsConfig, make_dataset
from crpslam.trainer import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("CRPSLAM_CACHE", ROOT / ".cache" / "reference"))
SEED = 0


def reference_dataset():
    path = CACHE / "data"
    if not (path / "manifest.txt").exists():
        ds = make_dataset(ToyDynamicsConfig(), seed=SEED)
        io.save_dataset(ds, path, force=True)
    return io.load_dataset(path), io.dataset_id(path)


def reference_run():
    """Train (or resume) the desk-schedule reference model; returns (dataset, state, fcfg, tcfg)."""
    ds, did = reference_dataset()
    run = CACHE / "run"
    fcfg, tcfg = net.ForecasterConfig(), TrainConfig(seed=SEED)
    state = None
    if (run / "state.txt").exists():
        state, fcfg, tcfg, _ = io.load_train_state(run)
    if state is None or state.epoch < tcfg.total_epochs:
        state = train(
            ds.normalized("train"), ds.normalized("val"), ds.domain, fcfg, tcfg, state=state,
            on_epoch_end=lambda st, cfg: io.save_train_state(run, st, fcfg, cfg, did),
        )
    return ds, state, fcfg, tcfg


def reference_forecast(members: int = 25, lead_steps: int = 19, t0: int = 1):
    """Test-split ensemble forecast from the final reference weights (cached)."""
    from crpslam.forecast import forecast_split

    ds, state, fcfg, _ = reference_run()
    path = CACHE / (f"forecast_n{members}_t{lead_steps}" + (f"_from{t0}" if t0 != 1 else ""))
    digest = io.params_digest(state.params)
    if (path / "manifest.txt").exists():
        fc = io.load_forecast(path)
        if fc.provenance.get("checkpoint_id") == digest:
            return fc
    fc = forecast_split(state.params, ds.normalized("test"), ds.stats, ds.domain, fcfg, members, lead_steps,
                        SEED, t0=t0, provenance={"dataset_id": io.dataset_id(CACHE / "data"), "checkpoint_id": digest})
    io.save_forecast(path, fc)
    return fc


if __name__ == "__main__":
    t0 = time.perf_counter()
    _, st, _, _ = reference_run()
    for row in st.log:
        print(row)
    print(f"total {time.perf_counter() - t0:.1f}s, training wall {sum(r['wall_time'] for r in st.timing):.1f}s")
