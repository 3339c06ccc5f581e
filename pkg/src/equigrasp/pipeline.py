"""End-to-end operations behind the CLI verbs."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .algebra import InvalidInputError
from .config import RunConfig
from .data import CloudRecord, GraspRecord, grasps_for_object, make_object, random_rigid
from .denoiser import Denoiser
from .diffusion import draw_noise, sample
from .hand import Grasp, HandSpec
from .io import read_split, write_split
from .physics import PhysContext, diversity_score, phys_loss, success_eval, success_params, transform_grasp
from .train import TrainResult, train


@dataclass
class Dataset:
    clouds: dict[str, CloudRecord]
    grasps: list[GraspRecord]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
        """(clouds [U, N, 3], grasp vectors [M, 9+k], object index [M], object ids)."""
        names = sorted({r.object for r in self.grasps})
        missing = [n for n in names if n not in self.clouds]
        if missing:
            raise InvalidInputError(f"grasps refer to unknown object(s): {', '.join(missing)}")
        pos = {n: i for i, n in enumerate(names)}
        clouds = np.stack([self.clouds[n].points for n in names])
        g = np.stack([r.grasp.vector() for r in self.grasps])
        idx = np.array([pos[r.object] for r in self.grasps])
        return clouds, g, idx, names


def gen_data(cfg: RunConfig, out: Path | None = None) -> dict[str, Dataset]:
    """Training objects with filtered ground-truth grasps, test clouds, and an SE(3)-moved test copy."""
    hand = cfg.hand()
    shapes = cfg.shape_list()
    if not shapes:
        raise InvalidInputError("no object shapes configured")
    rng = np.random.default_rng(cfg.seed)
    params = success_params(cfg.contact())
    train_clouds, train_grasps = {}, []
    for i in range(cfg.n_objects):
        name = f"obj{i:03d}"
        cloud = make_object(shapes[i % len(shapes)], rng, cfg.n_points)
        try:
            grasps = grasps_for_object(cloud, hand, cfg.grasps_per_object, rng, params, squeeze=cfg.squeeze)
        except RuntimeError as exc:
            raise RuntimeError(f"{name}: {exc}") from None
        train_clouds[name] = cloud
        train_grasps += [GraspRecord(g, object=name, success=True) for g in grasps]
    test_clouds = {f"test{i:03d}": make_object(shapes[i % len(shapes)], rng, cfg.n_points)
                   for i in range(cfg.test_objects)}
    ood_clouds = {}
    for name, cloud in test_clouds.items():
        rot, t = random_rigid(rng, cfg.ood_shift)
        ood_clouds[name.replace("test", "ood")] = CloudRecord(cloud.label, cloud.points @ rot.T + t)
    splits = {
        "train": Dataset(train_clouds, train_grasps),
        "test": Dataset(test_clouds, []),
        "ood": Dataset(ood_clouds, []),
    }
    if out is not None:
        out = Path(out)
        for split, ds in splits.items():
            write_split(out / split, ds.clouds, ds.grasps)
        hand.save(out / "hand.json")
        cfg.save(out / "config.txt")
    return splits


def load_dataset(directory) -> Dataset:
    clouds, grasps = read_split(directory)
    return Dataset(clouds, grasps)


def train_model(cfg: RunConfig, ds: Dataset, log_every: int = 0) -> TrainResult:
    clouds, g, idx, _ = ds.arrays()
    return train(clouds, g, idx, cfg.denoiser(), cfg.schedule(), steps=cfg.steps, seed=cfg.seed, lr=cfg.lr,
                 batch=cfg.batch, objects_per_batch=cfg.objects_per_batch, log_every=log_every)


def load_checkpoint(cfg: RunConfig, path) -> Denoiser:
    """Load a checkpoint, insisting its architecture matches the run config."""
    return Denoiser.load(path, expect=cfg.denoiser())


def sample_noise(cfg: RunConfig, n: int, seed: int) -> tuple[np.ndarray, list[int]]:
    """Per-sample noise streams: sample i depends only on (seed, i), not on n."""
    sched = cfg.schedule()
    dim = cfg.denoiser().grasp_dim
    streams = [draw_noise(sched, 1, dim, np.random.default_rng([seed, i])) for i in range(n)]
    noise = np.concatenate(streams, axis=1) if streams else np.zeros((sched.T + 1, 0, dim))
    return noise, [seed * 100003 + i for i in range(n)]


def sample_grasps(cfg: RunConfig, net: Denoiser, cloud: CloudRecord, n: int, seed: int, lam: float | None = None,
                  object_name: str = "", trace=None, with_phys: bool | None = None) -> list[GraspRecord]:
    """``n`` seeded samples for one cloud, optionally physics-guided.

    Records carry the final L_phys whenever guidance is active (or when
    ``with_phys`` asks for it).
    """
    lam = cfg.guidance_lambda if lam is None else lam
    guidance = cfg.guidance()
    guidance = replace(guidance, lam=lam)
    ctx = PhysContext(cloud.points, cfg.hand(), cfg.contact())
    noise, seeds = sample_noise(cfg, n, seed)
    if n == 0:
        return []
    g = sample(net, cfg.schedule(), cloud.points, n, noise=noise, guidance=guidance, ctx=ctx, trace=trace)
    with_phys = lam > 0 if with_phys is None else with_phys
    out = []
    for i, row in enumerate(g):
        L = phys_loss(row, ctx).total if with_phys else None
        out.append(GraspRecord(Grasp.from_vector(row), object=object_name, seed=seeds[i], L_phys=L))
    return out


@dataclass
class EvalReport:
    n: int
    success_rate: float
    diversity: float
    rows: list[tuple[int, str, bool, float]]  # index, object, success, worst displacement (m)

    def text(self) -> str:
        lines = [
            "# grasp evaluation report",
            "# diversity: population std per joint over the whole evaluated set, averaged over joints",
            f"grasps = {self.n}",
            f"success_rate = {self.success_rate!r}",
            f"diversity = {self.diversity!r}",
        ]
        per_obj: dict[str, list[bool]] = {}
        for _, obj, ok, _ in self.rows:
            per_obj.setdefault(obj, []).append(ok)
        for obj, oks in sorted(per_obj.items()):
            lines.append(f"success_rate[{obj}] = {float(np.mean(oks))!r}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        lines = ["index\tobject\tsuccess\tmax_displacement_m"]
        lines += [f"{i}\t{o}\t{int(s)}\t{d!r}" for i, o, s, d in self.rows]
        return "\n".join(lines) + "\n"


def eval_grasps(records: list[GraspRecord], clouds: dict[str, CloudRecord], hand: HandSpec,
                params=None) -> EvalReport:
    if not records:
        raise InvalidInputError("no grasps to evaluate")
    missing = sorted({r.object for r in records} - clouds.keys())
    if missing:
        raise InvalidInputError(f"grasps refer to unknown object(s): {', '.join(missing)}")
    bad_k = [i for i, r in enumerate(records) if r.grasp.q.shape != (hand.dof,)]
    if bad_k:
        raise InvalidInputError(f"grasp {bad_k[0]} has {records[bad_k[0]].grasp.q.shape[0]} joints, hand has {hand.dof}")
    rows = []
    for i, r in enumerate(records):
        rep = success_eval(r.grasp, clouds[r.object].points, hand, params=params)
        rows.append((i, r.object, rep.success, float(np.max(rep.displacements))))
    q = np.stack([r.grasp.q for r in records])
    div = diversity_score(q) if len(records) > 1 else 0.0
    return EvalReport(len(records), float(np.mean([s for _, _, s, _ in rows])), div, rows)


def transform_record(rec: GraspRecord, rot, t) -> GraspRecord:
    return GraspRecord(transform_grasp(rec.grasp, rot, t), rec.object, rec.seed, rec.L_phys, rec.success)
