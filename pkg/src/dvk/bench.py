"""Benchmark harness: expert demos, baselines, suites, success-rate reports.

Two suites probe generalization of behaviour-cloned grasping:

- intra: four mug variants, leave-one-out over the variant left out of
  training (4 folds).
- inter: train on three morphologies, evaluate on seven never-seen
  templates that share only the handle part (1 fold).

Methods share demos and reference sets per (fold, seed).  Every episode
owns an isolated random stream derived from (suite, fold, method, seed,
object, episode index), so runs are reproducible and method results are
statistically independent draws of the world.

The policy for the "dvk" method consumes the references that received at
least one saliency vote.  Reference files always store the full top-m set
(zero-vote entries pad the tail when fewer than m clusters vote), but a
padding centroid is an arbitrary shard of background noise: its best-match
cell is a fresh lottery every frame, and feeding those coordinates to the
policy only teaches it to memorize noise.  Training on the voted subset
keeps the policy input meaningful at every (clusters, keep) setting.
"""

import dataclasses
import shutil
import tempfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from ._util import child_seed
from .errors import BadConfig, MissingAttention
from .formats import DemoDataset, PatchGrid, ReferenceSet, write_demos
from .keypoints import extract_keypoints, policy_input
from .policy import TrainConfig, forward, train_on_arrays
from .references import InitConfig, init_references
from .world import (
    DEFAULT_SIGMA,
    INTER_TEST,
    INTER_TRAIN,
    INTRA_VARIANTS,
    World,
    rollout,
    spawn_object,
)

METHODS = ("dvk", "pooled", "cls_like", "expert")


def collect_demos(
    world: World,
    class_ids,
    per_object: int,
    seed: int,
    out_dir,
    overwrite: bool = False,
) -> DemoDataset:
    """Roll the scripted expert and persist a demo dataset directory."""
    if per_object < 1:
        raise BadConfig(f"per_object={per_object}, must be >= 1")

    def episodes():
        for cid in class_ids:
            for e in range(per_object):
                obj = spawn_object(world, cid, child_seed(seed, "demo-obj", cid, e))
                res = rollout(
                    world,
                    obj,
                    seed=child_seed(seed, "demo-ep", cid, e),
                    agent=None,
                    record=True,
                )
                yield res.steps

    return write_demos(out_dir, episodes(), overwrite=overwrite)


def pooled_input(grid: PatchGrid) -> np.ndarray:
    """Flat baseline: generalized-mean pooling (p=3, signed via cbrt)
    concatenated with the attention-weighted mean embedding. Length 2*dim."""
    e = grid.embeddings.astype(np.float64)
    gem = np.cbrt(np.mean(e**3, axis=(0, 1)))
    if grid.attention is None:
        raise MissingAttention(f"frame {grid.frame_id!r} has no attention plane")
    w = grid.attention.astype(np.float64)
    weighted = np.tensordot(w, e, axes=([0, 1], [0, 1])) / max(w.sum(), 1e-12)
    return np.concatenate([gem, weighted])


def cls_like_input(grid: PatchGrid) -> np.ndarray:
    """Global-token proxy: the attention-weighted mean embedding alone."""
    if grid.attention is None:
        raise MissingAttention(f"frame {grid.frame_id!r} has no attention plane")
    e = grid.embeddings.astype(np.float64)
    w = grid.attention.astype(np.float64)
    return np.tensordot(w, e, axes=([0, 1], [0, 1])) / max(w.sum(), 1e-12)


def method_input(method: str, grid: PatchGrid, refs, proprio) -> np.ndarray:
    proprio = np.asarray(proprio, dtype=np.float64).ravel()
    if method == "dvk":
        return policy_input(extract_keypoints(grid, refs), proprio)
    if method == "pooled":
        return np.concatenate([pooled_input(grid), proprio])
    if method == "cls_like":
        return np.concatenate([cls_like_input(grid), proprio])
    raise BadConfig(f"unknown method {method!r}")


def build_method_arrays(dataset: DemoDataset, refs, methods):
    """One pass over the demo frames producing inputs per method."""
    xs = {m: [] for m in methods}
    ys = []
    for _, step in dataset.iter_steps():
        grid = step.load_frame()
        for m in methods:
            xs[m].append(method_input(m, grid, refs, step.proprio))
        ys.append(np.asarray(step.action, dtype=np.float64))
    targets = np.stack(ys) if ys else np.zeros((0, 0))
    return {m: np.stack(v) for m, v in xs.items()}, targets


def voted_refs(refs: ReferenceSet) -> ReferenceSet:
    """The prefix of references that received at least one vote.

    Votes are stored non-increasing, so the zero-vote padding (present
    when fewer than `keep` clusters voted) is always a trailing slice.
    Falls back to the first reference if nothing voted at all.
    """
    k = max(1, int(np.count_nonzero(refs.votes)))
    if k == len(refs.votes):
        return refs
    return ReferenceSet(
        centroids=refs.centroids[:k].copy(),
        votes=refs.votes[:k].copy(),
        config=dataclasses.replace(refs.config, keep=k),
        all_votes_zero=refs.all_votes_zero,
    )


def make_agent(method: str, policy, refs):
    def agent(grid, proprio):
        return forward(policy, method_input(method, grid, refs, proprio))

    return agent


def evaluate(
    world: World,
    class_id: str,
    agent,
    episodes: int,
    seed: int,
) -> float:
    """Success rate over seeded episodes; agent=None runs the expert."""
    wins = 0
    for e in range(episodes):
        obj = spawn_object(world, class_id, child_seed(seed, "eval-obj", class_id, e))
        res = rollout(world, obj, seed=child_seed(seed, "eval-ep", class_id, e), agent=agent)
        wins += res.success
    return wins / episodes


@dataclass
class BenchConfig:
    """Suite settings plus the training protocol shared by all methods.

    The trainer runs long (600 epochs) with a small tanh network and plain
    SGD, and picks its checkpoint by rolling out candidates on the fold's
    training objects every eval_every epochs.  Low capacity, bounded
    activations, and rollout-based selection together keep the policy from
    memorizing frame-specific noise that minimizing training loss alone
    cannot distinguish from signal.
    """

    suite: str = "inter"  # "intra" or "inter"
    methods: tuple = ("dvk", "pooled")
    seeds: tuple = (0, 1, 2)
    episodes: int = 50
    demos_per_object: int = 60
    world_seed: int = 7
    sigma: float = DEFAULT_SIGMA
    clusters: int = 100
    keep: int = 50
    tau: float = 0.2
    stride: int = 5
    epochs: int = 600
    batch_size: int = 64
    learning_rate: float = 0.03
    hidden: tuple = (16, 16)
    activation: str = "tanh"
    optimizer: str = "sgd"
    voted_refs_only: bool = True  # policy consumes refs with votes > 0
    rollout_select: bool = True  # checkpoint by train-object rollouts
    hook_episodes: int = 32  # selection episodes per train object
    workdir: str | None = None  # demos land here (temp dir when None)
    keep_workdir: bool = False

    def validate(self) -> None:
        if self.suite not in ("intra", "inter"):
            raise BadConfig(f"unknown suite {self.suite!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise BadConfig(f"unknown methods {bad}")
        if len(self.seeds) < 1:
            raise BadConfig("need at least one seed")
        if self.episodes < 1 or self.demos_per_object < 1:
            raise BadConfig("episodes and demos_per_object must be >= 1")
        if self.rollout_select and self.hook_episodes < 1:
            raise BadConfig("hook_episodes must be >= 1")


def suite_folds(suite: str):
    if suite == "intra":
        return [
            {
                "name": f"holdout_{held}",
                "train": [v for v in INTRA_VARIANTS if v != held],
                "test": [held],
            }
            for held in INTRA_VARIANTS
        ]
    return [{"name": "novel", "train": list(INTER_TRAIN), "test": list(INTER_TEST)}]


def _selection_hook(world, fold, method, refs, config, seed):
    """Checkpoint scorer: mean success over the fold's training objects.

    Selection streams are separate from evaluation streams, and held-out
    objects are never touched, so checkpoint choice cannot leak test
    information.
    """

    def hook(epoch, policy):
        agent = make_agent(method, policy, refs)
        return float(
            np.mean(
                [
                    evaluate(
                        world,
                        cid,
                        agent,
                        config.hook_episodes,
                        seed=child_seed(
                            seed, "bench-hook", config.suite,
                            fold["name"], method, cid,
                        ),
                    )
                    for cid in fold["train"]
                ]
            )
        )

    return hook


def run_benchmark(config: BenchConfig = BenchConfig()) -> dict:
    """Run a full suite and return the report dict (see README for schema)."""
    config.validate()
    world = World(sigma=config.sigma, seed=config.world_seed)
    folds = suite_folds(config.suite)
    if config.workdir is not None:
        work = Path(config.workdir)
        work.mkdir(parents=True, exist_ok=True)
        cleanup_root = False
    else:
        work = Path(tempfile.mkdtemp(prefix="dvk-bench-"))
        cleanup_root = not config.keep_workdir
    trained = [m for m in config.methods if m != "expert"]
    report = {
        "suite": config.suite,
        "config": {**asdict(config), "methods": list(config.methods),
                   "seeds": list(config.seeds), "hidden": list(config.hidden)},
        "folds": [],
    }
    try:
        for fold in folds:
            fold_out = {"name": fold["name"], "train_objects": fold["train"],
                        "test_objects": fold["test"], "seeds": []}
            for seed in config.seeds:
                demo_dir = work / f"{fold['name']}_s{seed}" / "demos"
                dataset = collect_demos(
                    world,
                    fold["train"],
                    config.demos_per_object,
                    seed=child_seed(seed, "bench-demos", fold["name"]),
                    out_dir=demo_dir,
                    overwrite=True,
                )
                refs = None
                seed_out = {"seed": seed, "methods": {}}
                if any(m == "dvk" for m in trained):
                    full_refs = init_references(
                        dataset,
                        InitConfig(
                            clusters=config.clusters,
                            keep=config.keep,
                            tau=config.tau,
                            seed=child_seed(seed, "bench-refs", fold["name"]),
                            stride=config.stride,
                        ),
                    )
                    refs = voted_refs(full_refs) if config.voted_refs_only else full_refs
                    seed_out["policy_refs"] = len(refs.votes)
                if trained:
                    inputs, targets = build_method_arrays(dataset, refs, trained)
                for method in config.methods:
                    if method == "expert":
                        agent = None
                    else:
                        tc = TrainConfig(
                            epochs=config.epochs,
                            batch_size=config.batch_size,
                            learning_rate=config.learning_rate,
                            seed=child_seed(seed, "bench-train", fold["name"], method),
                            hidden=tuple(config.hidden),
                            activation=config.activation,
                            optimizer=config.optimizer,
                        )
                        hook = None
                        if config.rollout_select:
                            hook = _selection_hook(
                                world, fold, method, refs, config, seed
                            )
                        rep = train_on_arrays(inputs[method], targets, tc, eval_hook=hook)
                        agent = make_agent(method, rep.policy, refs)
                    rates = {}
                    for split in ("train", "test"):
                        for cid in fold[split]:
                            rates.setdefault(split, {})[cid] = evaluate(
                                world,
                                cid,
                                agent,
                                config.episodes,
                                seed=child_seed(
                                    seed, "bench-eval", config.suite,
                                    fold["name"], method, cid,
                                ),
                            )
                    seed_out["methods"][method] = {
                        "train": rates["train"],
                        "test": rates["test"],
                        "train_mean": float(np.mean(list(rates["train"].values()))),
                        "test_mean": float(np.mean(list(rates["test"].values()))),
                    }
                fold_out["seeds"].append(seed_out)
                if not config.keep_workdir:
                    shutil.rmtree(demo_dir.parent, ignore_errors=True)
            fold_out["methods"] = {}
            for method in config.methods:
                tm = [s["methods"][method]["train_mean"] for s in fold_out["seeds"]]
                em = [s["methods"][method]["test_mean"] for s in fold_out["seeds"]]
                fold_out["methods"][method] = {
                    "train_mean": float(np.mean(tm)),
                    "train_std": float(np.std(tm, ddof=1)) if len(tm) > 1 else 0.0,
                    "test_mean": float(np.mean(em)),
                    "test_std": float(np.std(em, ddof=1)) if len(em) > 1 else 0.0,
                }
            report["folds"].append(fold_out)
        # per-seed mean across folds, then mean/std over seeds
        report["methods"] = {}
        for method in config.methods:
            per_seed_train = []
            per_seed_test = []
            for i, seed in enumerate(config.seeds):
                per_seed_train.append(
                    float(np.mean([f["seeds"][i]["methods"][method]["train_mean"]
                                   for f in report["folds"]]))
                )
                per_seed_test.append(
                    float(np.mean([f["seeds"][i]["methods"][method]["test_mean"]
                                   for f in report["folds"]]))
                )
            report["methods"][method] = {
                "per_seed_train": per_seed_train,
                "per_seed_test": per_seed_test,
                "train_mean": float(np.mean(per_seed_train)),
                "train_std": float(np.std(per_seed_train, ddof=1)) if len(per_seed_train) > 1 else 0.0,
                "ood_mean": float(np.mean(per_seed_test)),
                "ood_std": float(np.std(per_seed_test, ddof=1)) if len(per_seed_test) > 1 else 0.0,
            }
    finally:
        if cleanup_root:
            shutil.rmtree(work, ignore_errors=True)
    return report
