"""Acceptance criteria, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines live; they
are also printed through pytest's capture so they reach ``pytest -v`` logs.
The slow fixtures build the default dataset and train the default model once.
"""
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from equigrasp import algebra as ga
from equigrasp import verify
from equigrasp.config import RunConfig
from equigrasp.data import sphere_cloud
from equigrasp.hand import Grasp, toy_hand
from equigrasp.physics import (
    SimScene,
    default_velocities,
    limit_loss,
    range_loss,
    stability_loss,
    success_eval,
)
from equigrasp.pipeline import gen_data, load_dataset, train_model

from . import oracles

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[ACCEPTANCE] {'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "data"
    gen_data(RunConfig(), out)
    return out


@pytest.fixture(scope="session")
def trained(dataset):
    cfg = RunConfig()
    return train_model(cfg, load_dataset(dataset / "train"))


def test_algebra_exactness(report):
    start = time.perf_counter()
    mismatched = 0
    for i, a in enumerate(oracles.BLADES):
        for j, b in enumerate(oracles.BLADES):
            sign, blade = oracles.blade_product(a, b)
            expect = np.zeros(16)
            if sign:
                expect[oracles.BLADES.index(blade)] = sign
            mismatched += not np.array_equal(ga.GP_TABLE[i, j], expect)
    eye = np.eye(16)
    wedge_ok = sum(np.array_equal(ga.wedge(eye[i], ga.dual(eye[i])), eye[15]) for i in range(16))
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and wedge_ok == 16 and elapsed < 1.0
    report("algebra exactness", ok, f"{256 - mismatched}/256 products, {wedge_ok}/16 x^dual(x)=e0123, {elapsed:.3f}s")


def test_embedding_action_fidelity(report):
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1, 1, (1000, 3))
    worst = 0.0
    for _ in range(10):
        rot = Rotation.random(random_state=rng).as_matrix()
        shift = rng.uniform(-1, 1, 3)
        got = ga.extract_point(ga.sandwich(ga.motor_from_matrix(rot, shift), ga.embed_point(pts)))
        worst = max(worst, float(np.max(np.abs(got - (pts @ rot.T + shift)))))
    report("embedding/action fidelity", worst < 1e-9, f"1000 points x 10 motors, max abs err {worst:.1e}")


def test_layer_equivariance(report):
    start = time.perf_counter()
    worst = verify.layer_residuals(100)
    status, detail = verify.suite_denoiser(RunConfig(), n_motors=20)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-9 and status == verify.PASS and elapsed < 60
    layers = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("layer equivariance", ok, f"100 motors: {layers}; denoiser 20 motors: {detail}; {elapsed:.1f}s")


def test_gradient_correctness(report):
    prim = verify.primitive_grad_errors()
    loss = verify.loss_grad_error(RunConfig())
    worst = max(prim.values())
    ok = worst < 1e-4 and loss < 1e-4
    report("gradient correctness", ok,
           f"{len(prim)} primitives worst {worst:.1e} ({max(prim, key=prim.get)}), full loss {loss:.1e}")


def test_sampler_symmetry(report, trained):
    cfg = RunConfig()
    rand, rbits = verify.sampler_residual(verify.Denoiser(cfg.denoiser(), seed=5), cfg, 20)
    model, mbits = verify.sampler_residual(trained.net, cfg, 20)
    ok = rand < 1e-5 and model < 1e-5 and rbits and mbits
    report("sampler symmetry", ok,
           f"20 motors: random weights {rand:.1e}, trained {model:.1e}, joints bit-identical {rbits and mbits}")


def test_training_progress(report, dataset, trained):
    losses = np.asarray(trained.losses)
    head, tail = losses[:20].mean(), losses[-100:].mean()
    reduction = 1 - tail / head
    cfg = RunConfig().with_overrides(steps=30)
    ds = load_dataset(dataset / "train")
    a, b = train_model(cfg, ds), train_model(cfg, ds)
    same = a.losses == b.losses and np.array_equal(a.net.params.flat(), b.net.params.flat())
    ok = len(losses) <= 2000 and reduction >= 0.5 and trained.seconds <= 900 and same
    report("training progress", ok,
           f"L_eps {head:.2f} -> {tail:.2f} ({reduction:.0%}) in {len(losses)} steps, "
           f"{trained.seconds:.0f}s, deterministic {same}")


def test_ood_robustness(report, dataset, trained):
    cfg = RunConfig()
    clouds = [c.points for c in load_dataset(dataset / "test").clouds.values()]
    per_cloud = -(-100 // len(clouds))
    rc, rm = verify.ood_rates(cfg, trained.net, clouds, per_cloud, seed=4242)
    lo, hi = verify.wilson_interval(round(rc.success_rate * rc.n), rc.n)
    ok = rc.n >= 100 and rm.n >= 100 and lo <= rm.success_rate <= hi
    report("OOD robustness", ok,
           f"canonical {rc.success_rate:.3f} 95% [{lo:.3f}, {hi:.3f}] n={rc.n}; "
           f"SE(3)-moved {rm.success_rate:.3f} n={rm.n} (independent seeds)")


def test_refinement_ordering(report, dataset, trained):
    cfg = RunConfig()
    test = [c.points for c in load_dataset(dataset / "test").clouds.values()]
    clouds = [test[i % len(test)] for i in range(20)]
    # seeds disjoint from the ones used to pick the guidance window
    runs = verify.refinement_runs(cfg, trained.net, clouds, lams=(0.0, 0.1, 1.0), per_cloud=5, seed=9000)
    succ = {lam: np.mean([r[lam][1] for r in runs]) for lam in (0.0, 1.0)}
    lower = np.mean([r[1.0][0] < r[0.0][0] for r in runs])
    monotone = np.mean([r[0.0][0] >= r[0.1][0] >= r[1.0][0] for r in runs])
    ok = succ[1.0] >= succ[0.0] and lower >= 0.8 and monotone >= 0.8
    report("refinement ordering", ok,
           f"success guided {succ[1.0]:.2f} vs unguided {succ[0.0]:.2f}; mean L_phys lower in {lower:.0%} "
           f"of 20 runs; non-increasing over lambda {{0, 0.1, 1}} in {monotone:.0%}")


def test_physics_sanity(report):
    lo, up = np.array([0.0, -1.0]), np.array([1.0, 2.0])
    mid = (lo + up) / 2
    examples = [
        range_loss(mid, lo, up) == 0 and limit_loss(mid, lo, up) == 0,
        abs(range_loss(up, lo, up) - np.sum(((up - lo) / 2) ** 2)) < 1e-15 and limit_loss(up, lo, up) == 0,
        limit_loss([1.5], [0.0], [1.0]) == 0.5,
    ]
    ball = sphere_cloud(0.01, 128, np.random.default_rng(0))
    vels = default_velocities()
    free = stability_loss(SimScene(ball)) == np.mean(np.sum(vels * vels, axis=1))
    rep = success_eval(Grasp([1, 0, 0, 0, 1, 0], [0, 0, 1.0], np.zeros(4)), ball, toy_hand(), early_exit=False)
    kin = 0.5 * 0.5 * 0.6**2
    falls = not rep.success and np.allclose(rep.displacements, kin, rtol=0.01)
    ok = all(examples) and free and falls
    report("physics sanity", ok,
           f"joint-loss examples {sum(examples)}/3, free L_stability exact {free}, "
           f"free object moves {np.min(rep.displacements):.4f}..{np.max(rep.displacements):.4f} m "
           f"(1/2 a t^2 = {kin:.4f}) and fails {not rep.success}")


def test_verify_command(report):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "equigrasp.cli", "verify"], capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    ok = proc.returncode == 0 and elapsed < 600
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    report("verify command", ok, f"exit {proc.returncode} in {elapsed:.0f}s ({summary})")
