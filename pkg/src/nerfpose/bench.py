"""Desk-scale evaluation protocol: perturb, re-estimate, aggregate.

Each trial perturbs a ground-truth pose within stated rotation/translation
limits, runs pose optimization from the perturbed start, and logs rotation
and translation errors along the way.  Reports aggregate, per logged step,
the fraction of trials with rotation error below 5 degrees, the fraction
with translation error below a threshold (0.05 scene units standing in for
5 cm), and the fraction satisfying both at once.  Curves are raw: success
may dip if the optimizer overshoots.

Trials are independent jobs; a bounded thread pool may run them
concurrently, and aggregation folds results in trial order so reports are
identical at any worker count.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .pose_opt import DivergedError, EstimatorConfig, estimate_pose
from .render import Camera, RenderConfig, render_image
from .se3 import Pose, perturb_pose, pose_errors

ROTATION_SUCCESS_DEG = 5.0
TRANSLATION_SUCCESS = 0.05


@dataclass(frozen=True)
class TrialSpec:
    """One perturb-and-recover experiment."""

    scene_id: str
    gt_pose: Pose
    rot_limit_deg: float
    trans_limit: float
    strategy: str
    batch_size: int
    seed: int


@dataclass(frozen=True)
class BenchScene:
    field: object
    camera: Camera
    render: RenderConfig = field(default_factory=lambda: RenderConfig(n_samples=64))


@dataclass
class TrialResult:
    index: int
    initial_errors: tuple
    final_errors: tuple
    steps: list
    rot_errors: list
    trans_errors: list
    diverged: bool


@dataclass
class BenchReport:
    logged_steps: list
    trials: list
    rot_success: list
    trans_success: list
    joint_success: list
    rot_threshold_deg: float = ROTATION_SUCCESS_DEG
    trans_threshold: float = TRANSLATION_SUCCESS

    def final_success_fraction(self) -> float:
        ok = [
            t.final_errors[0] < self.rot_threshold_deg
            and t.final_errors[1] < self.trans_threshold
            for t in self.trials
        ]
        return float(np.mean(ok))

    def success_at_step(self, step: int) -> float:
        """Joint success fraction at the largest logged step <= step."""
        idx = max(i for i, s in enumerate(self.logged_steps) if s <= step)
        return self.joint_success[idx]

    def to_json_dict(self) -> dict:
        return {
            "logged_steps": self.logged_steps,
            "rot_threshold_deg": self.rot_threshold_deg,
            "trans_threshold": self.trans_threshold,
            "rot_success": self.rot_success,
            "trans_success": self.trans_success,
            "joint_success": self.joint_success,
            "trials": [
                {
                    "index": t.index,
                    "initial_rot_deg": t.initial_errors[0],
                    "initial_trans": t.initial_errors[1],
                    "final_rot_deg": t.final_errors[0],
                    "final_trans": t.final_errors[1],
                    "diverged": t.diverged,
                }
                for t in self.trials
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    def write_csv(self, path) -> None:
        """One row per trial per logged step, for external plotting."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["trial", "step", "rotation_error_deg", "translation_error"])
            for t in self.trials:
                for s, r, tr in zip(t.steps, t.rot_errors, t.trans_errors):
                    writer.writerow([t.index, s, repr(r), repr(tr)])


def _trial_errors_at_logged_steps(trajectory, gt_pose, logged_steps):
    """Errors at each logged step, carrying the last pose forward when the
    run stopped early (converged) before the step grid ended."""
    errors = [pose_errors(p.pose, gt_pose) for p in trajectory]
    steps = [p.step for p in trajectory]
    out = []
    for s in logged_steps:
        candidates = [i for i, ts in enumerate(steps) if ts <= s]
        out.append(errors[candidates[-1]] if candidates else errors[0])
    return out


def run_trial(spec: TrialSpec, scene: BenchScene, base_config: EstimatorConfig,
              observed: np.ndarray, logged_steps) -> tuple:
    config = replace(base_config, strategy=spec.strategy, batch_size=spec.batch_size)
    seq = np.random.SeedSequence(spec.seed)
    rng_perturb, rng_estimate = (np.random.default_rng(s) for s in seq.spawn(2))
    t0 = perturb_pose(spec.gt_pose, spec.rot_limit_deg, spec.trans_limit, rng_perturb)
    initial = pose_errors(t0, spec.gt_pose)
    diverged = False
    try:
        final_pose, trajectory = estimate_pose(
            scene.field, scene.camera, observed, t0, config, rng_estimate
        )
    except DivergedError as err:
        diverged = True
        trajectory = err.trajectory
        if not trajectory:
            # nothing ran: the initialization is the best available estimate
            final_pose = t0
        else:
            final_pose = trajectory[-1].pose
    final = pose_errors(final_pose, spec.gt_pose)
    if trajectory:
        logged = _trial_errors_at_logged_steps(trajectory, spec.gt_pose, logged_steps)
    else:
        logged = [initial for _ in logged_steps]
    return initial, final, logged, diverged


def run_benchmark(specs, scenes: dict, base_config: EstimatorConfig,
                  log_every: int = 10, threads: int = 1) -> BenchReport:
    """Run every trial and fold the curves.

    ``scenes`` maps scene ids to BenchScene entries.  Observed images are
    rendered once per distinct (scene, pose); per-trial divergence is
    recorded as a failure but never aborts the suite.  The report is a
    pure function of (specs, scenes, seeds).
    """
    specs = list(specs)
    if not specs:
        raise ValueError("no trial specs given")
    max_steps = base_config.max_steps
    logged_steps = sorted(set(range(0, max_steps + 1, log_every)) | {max_steps})

    observed: dict = {}
    for spec in specs:
        key = (spec.scene_id, spec.gt_pose.matrix().tobytes())
        if key not in observed:
            scene = scenes[spec.scene_id]
            observed[key] = render_image(scene.field, scene.camera, spec.gt_pose, scene.render)

    def job(i):
        spec = specs[i]
        key = (spec.scene_id, spec.gt_pose.matrix().tobytes())
        return run_trial(spec, scenes[spec.scene_id], base_config, observed[key], logged_steps)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(job, range(len(specs))))
    else:
        outcomes = [job(i) for i in range(len(specs))]

    trials = []
    for i, (initial, final, logged, diverged) in enumerate(outcomes):
        trials.append(
            TrialResult(
                index=i,
                initial_errors=initial,
                final_errors=final,
                steps=list(logged_steps),
                rot_errors=[e[0] for e in logged],
                trans_errors=[e[1] for e in logged],
                diverged=diverged,
            )
        )
    rot_curve, trans_curve, joint_curve = [], [], []
    for j in range(len(logged_steps)):
        rots = np.array([t.rot_errors[j] for t in trials])
        trans = np.array([t.trans_errors[j] for t in trials])
        rot_curve.append(float(np.mean(rots < ROTATION_SUCCESS_DEG)))
        trans_curve.append(float(np.mean(trans < TRANSLATION_SUCCESS)))
        joint_curve.append(
            float(np.mean((rots < ROTATION_SUCCESS_DEG) & (trans < TRANSLATION_SUCCESS)))
        )
    return BenchReport(
        logged_steps=list(logged_steps),
        trials=trials,
        rot_success=rot_curve,
        trans_success=trans_curve,
        joint_success=joint_curve,
    )


def make_histogram(errors_before, errors_after, bin_edges):
    """Per-bin counts before and after optimization; totals preserved.

    Values outside the edges are clamped into the end bins so no sample
    is dropped from the comparison.
    """
    errors_before = np.asarray(errors_before, dtype=float)
    errors_after = np.asarray(errors_after, dtype=float)
    if errors_before.size == 0 or errors_after.size == 0:
        raise ValueError("need nonempty error lists")
    edges = np.asarray(bin_edges, dtype=float)
    lo, hi = edges[0], edges[-1]
    eps = (hi - lo) * 1e-12
    before = np.clip(errors_before, lo, hi - eps)
    after = np.clip(errors_after, lo, hi - eps)
    counts_before, _ = np.histogram(before, bins=edges)
    counts_after, _ = np.histogram(after, bins=edges)
    return counts_before, counts_after
