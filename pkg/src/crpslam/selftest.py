"""Statistical and numerical oracle suite shared by the CLI and the test suite."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import net
from .domain import DomainSpec, Trajectory
from .errors import EstimatorError
from .gradcheck import numerical_gradient, probe_indices, relative_error
from .rng import Stream
from .scoring import crps_biased, crps_fair, crps_gaussian
from .spectra import radial_spectrum
from .trainer import ar_loss, network_predictor

SQRT_PI = math.sqrt(math.pi)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _mc_scores(n: int, draws: int, obs: float, seed: int, chunk: int = 50_000):
    """Per-ensemble fair and biased CRPS for ``draws`` i.i.d. N(0,1) ensembles of size ``n``."""
    stream = Stream.for_purpose(seed, "mc-unbiased", member=n, lanes=1024)
    fair, biased = [], []
    left = draws
    while left:
        k = min(chunk, left)
        m = stream.normal(n * k).reshape(n, k)
        fair.append(crps_fair(m, obs))
        biased.append(crps_biased(m, obs))
        left -= k
    return np.concatenate(fair), np.concatenate(biased)


def crps_unbiasedness(obs: float = 0.5, sizes=(2, 4, 8, 16), draws: int = 200_000, seed: int = 0) -> dict:
    """MC means of fair/biased CRPS for N(0,1) ensembles against the closed form."""
    exact = crps_gaussian((0.0, 1.0), obs)
    out = {"exact": exact, "sizes": {}}
    for n in sizes:
        fair, biased = _mc_scores(n, draws, obs, seed)
        out["sizes"][n] = {
            "fair": float(fair.mean()),
            "fair_se": float(fair.std(ddof=1) / math.sqrt(draws)),
            "rel_err": abs(float(fair.mean()) - exact) / exact,
            "biased_excess": float(biased.mean()) - exact,
            "biased_se": float(biased.std(ddof=1) / math.sqrt(draws)),
            "expected_excess": (1.0 / (2 * n)) * 2.0 / SQRT_PI,
        }
    return out


def propriety_scan(draws: int = 100_000, n: int = 4, seed: int = 0, step: float = 0.25):
    """Expected fair CRPS of ``n``-member N(mu, sigma) ensembles over a 5x5 grid vs N(0,1) truth.

    Common random numbers across grid points keep the comparison sharp.
    Returns ``(mus, sigmas, table[mu, sigma])``.
    """
    mus = np.round(np.arange(-0.5, 0.5 + 1e-9, step), 10)
    sigmas = np.round(np.arange(0.5, 1.5 + 1e-9, step), 10)
    stream = Stream.for_purpose(seed, "propriety", lanes=1024)
    eps = stream.normal(n * draws).reshape(n, draws)
    truth = stream.normal(draws)
    table = np.empty((len(mus), len(sigmas)))
    for i, mu in enumerate(mus):
        for j, sigma in enumerate(sigmas):
            table[i, j] = float(np.mean(crps_fair(mu + sigma * eps, truth)))
    return mus, sigmas, table


def small_problem(seed: int = 0, height: int = 24, boundary: int = 4, length: int = 5,
                  dtype=np.float64) -> tuple[DomainSpec, Trajectory]:
    """A random trajectory on a small frame for gradient checks."""
    domain = DomainSpec(height=height, width=height, boundary=boundary)
    s = Stream.for_purpose(seed, "gradcheck-data", lanes=256)
    shape = (length, domain.d_x, height, height)
    states = s.normal(int(np.prod(shape))).reshape(shape).astype(dtype)
    ang = np.arange(length) * 2 * np.pi / 8
    forc = np.broadcast_to(np.stack([np.sin(ang), np.cos(ang)], 1)[:, :, None, None],
                           (length, 2, height, height)).astype(dtype)
    statics = s.normal(height * height).reshape(1, height, height).astype(dtype)
    return domain, Trajectory(states, forc, statics, 0)


def network_gradient_check(
    probes: int = 60,
    seed: int = 0,
    fcfg: net.ForecasterConfig | None = None,
    members: int = 2,
    ar_steps: int = 1,
    h: float = 1e-6,
) -> dict:
    """Autodiff vs 64-bit central differences of the CRPS loss through the forecaster."""
    fcfg = fcfg or net.ForecasterConfig(d_z=8, channels=(8, 16), embed_dim=16, mlp_hidden=16)
    domain, traj = small_problem(seed)
    params = {k: v.astype(np.float64) for k, v in net.init_params(fcfg, domain, seed).items()}
    samples = [(traj, 1)]

    def loss_value(track: bool):
        pt = {k: ad.Tensor(v, requires_grad=track, dtype=np.float64) for k, v in params.items()}
        loss = ar_loss(network_predictor(pt, domain, fcfg), samples, domain, members, ar_steps,
                       seed, fcfg.d_z, dtype=np.float64)
        return loss, pt

    loss, pt = loss_value(True)
    ad.backward(loss)
    names = sorted(params)
    stream = Stream.for_purpose(seed, "gradcheck-probes")
    picks = stream.integers(probes, len(names))
    worst, errors = 0.0, []
    for k, pick in enumerate(picks):
        name = names[int(pick)]
        idx = probe_indices(params[name].shape, 1, Stream.for_purpose(seed, "gradcheck-index", member=k))[0]
        auto = float(pt[name].grad[idx]) if pt[name].grad is not None else 0.0
        num = numerical_gradient(lambda: float(loss_value(False)[0].data), params[name], idx, h)
        err = relative_error(auto, num, floor=1e-6)
        errors.append((name, idx, auto, num, err))
        worst = max(worst, err)
    return {"worst": worst, "probes": errors, "loss": float(loss.data)}


def sinusoid_concentration(size: int = 64, k: int = 5) -> float:
    x = np.arange(size)
    field = np.cos(2 * np.pi * k * x / size)[None, :] * np.ones((size, 1))
    spec = radial_spectrum(field)
    return float(spec.energy[spec.wavenumber == k].sum() * spec.count[spec.wavenumber == k].sum() / spec.total())


def parseval_error(fields: int = 100, size: int = 32, seed: int = 0) -> float:
    """Worst relative gap between binned spectral energy and field variance."""
    s = Stream.for_purpose(seed, "parseval", lanes=256)
    worst = 0.0
    for _ in range(fields):
        f = s.normal(size * size).reshape(size, size)
        worst = max(worst, abs(radial_spectrum(f).total() - f.var()) / f.var())
    return worst


def run_all(quick: bool = False) -> list[Check]:
    checks = []

    def timed(name, fn):
        t0 = time.perf_counter()
        passed, detail = fn()
        checks.append(Check(name, passed, detail, time.perf_counter() - t0))

    draws = 50_000 if quick else 200_000

    def unbiased():
        r = crps_unbiasedness(draws=draws)
        worst = max(v["rel_err"] for v in r["sizes"].values())
        b = r["sizes"][2]
        ok_b = abs(b["biased_excess"] - b["expected_excess"]) <= 3 * b["biased_se"]
        detail = (f"worst |mean - {r['exact']:.6f}| / exact = {worst:.4%} (bound 1%); "
                  f"biased N=2 excess {b['biased_excess']:.5f} vs {b['expected_excess']:.5f}")
        return worst < 0.01 and ok_b, detail

    def proper():
        mus, sigmas, table = propriety_scan(draws=25_000 if quick else 100_000)
        i, j = np.unravel_index(np.argmin(table), table.shape)
        return (mus[i] == 0.0 and sigmas[j] == 1.0), f"argmin at mu={mus[i]:g}, sigma={sigmas[j]:g}"

    def n1_errors():
        try:
            crps_fair([1.0], 0.0)
        except EstimatorError:
            return True, "N=1 fair CRPS raises EstimatorError"
        return False, "N=1 fair CRPS returned a value"

    def grads():
        r = network_gradient_check(probes=20 if quick else 60)
        return r["worst"] < 1e-3, f"worst relative error {r['worst']:.2e} over {len(r['probes'])} probes"

    def sinusoid():
        frac = sinusoid_concentration()
        return frac >= 0.99, f"energy fraction in k=5: {frac:.6f}"

    def parseval():
        err = parseval_error(fields=20 if quick else 100)
        return err < 0.01, f"worst Parseval gap {err:.2e}"

    timed("crps-unbiasedness", unbiased)
    timed("crps-propriety", proper)
    timed("fair-crps-n1", n1_errors)
    timed("gradient-check", grads)
    timed("spectrum-sinusoid", sinusoid)
    timed("spectrum-parseval", parseval)
    return checks
