"""Training of the quasi-potential network.

Three data sets drive three loss components, each with its own Adam
instance applied in an alternating fashion (the components differ in
scale, and Adam's near scale-invariance makes per-component optimizers
the cheap fix):

* X1, attractor points:   L1 = mean[ V^2 + max(0, -V) ]
* X2, regression targets: L2 = mean[ (V - V_hat)^2 + max(0, -V) ]
* X3, residual points:    L3 = mean[ (f . grad V + 1/2 grad V^T A grad V)^2 ]

The hinge terms keep V nonnegative, X1 pins the zero level set and L3 is
what stops the fit from drifting away from a genuine Hamilton-Jacobi
solution.  Because that equation is scale invariant, the trained network
represents alpha * V for some alpha near one; the scale is recovered
afterwards by comparing network outputs with the regression targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .net import AdamState, MlpParams, MlpSpec

__all__ = [
    "QpTrainingSets",
    "QpTrainConfig",
    "TrainedQp",
    "TrainingDiverged",
    "hj_residual",
    "assemble_qp_sets",
    "qp_loss",
    "train_qp",
    "estimate_alpha",
    "alternating_adam",
]

ALPHA_TARGET_FLOOR = 0.05
ALPHA_MIN_POINTS = 10


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params


@dataclass
class QpTrainingSets:
    x1: np.ndarray                 # (M1, n) attractor points, target 0
    x2: np.ndarray                 # (M2, n)
    x2_targets: np.ndarray         # (M2,)
    x2_artificial: np.ndarray      # (M2,) bool
    x3: np.ndarray                 # (M3, n) residual points
    x2_is_reference: np.ndarray | None = None  # regression-backed targets

    def __post_init__(self):
        if self.x2_is_reference is None:
            self.x2_is_reference = ~np.asarray(self.x2_artificial, dtype=bool)

    def validate(self):
        if self.x1.shape[0] == 0:
            raise ValueError("attractor set X1 is empty")
        if self.x2.shape[0] == 0:
            raise ValueError("target set X2 is empty")
        if not np.all(np.isfinite(self.x2_targets)):
            raise ValueError("X2 targets must be finite")


@dataclass
class QpTrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr1: float = 2e-4
    lr2: float = 5e-4
    lr3: float = 1e-4
    artificial_value: float | None = None   # None: 1.5 x 95th pct of reliable targets
    far_field_density: float = 1e-6
    fine_tune_epochs: int = 20
    fine_tune_factor: float = 0.1
    residual_count: int | None = None       # cap on |X3|; None keeps all
    widths: tuple | None = None             # None: the standard ladder
    l2_lambda: float = 1e-3
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if min(self.lr1, self.lr2, self.lr3) <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainedQp:
    """Quasi-potential network plus its scale correction alpha."""

    params: MlpParams
    alpha: float
    log: list = field(default_factory=list)  # (epoch, L1, L2, L3) rows

    def v(self, x):
        return net.forward(self.params, x) / self.alpha

    def grad_v(self, x):
        return net.grad_input(self.params, x) / self.alpha

    def hess_v(self, x):
        return net.hessian_input(self.params, x) / self.alpha


@dataclass
class AnalyticQp:
    """Oracle stand-in for TrainedQp backed by closed-form callables."""

    v_fn: object
    grad_fn: object
    hess_fn: object
    alpha: float = 1.0

    def v(self, x):
        return self.v_fn(x)

    def grad_v(self, x):
        return self.grad_fn(x)

    def hess_v(self, x):
        return self.hess_fn(x)


def hj_residual(system, grad_v, x):
    """Hamilton-Jacobi residual  f . g + 1/2 g^T A g  for g = grad V."""
    g = np.asarray(grad_v, dtype=float)
    single = g.ndim == 1
    gb = g[None, :] if single else g
    xb = np.asarray(x, dtype=float)
    xb = xb[None, :] if xb.ndim == 1 else xb
    f = system.drift(xb)
    a_const = system.constant_diffusion
    if a_const is not None:
        quad = 0.5 * np.einsum("bi,ij,bj->b", gb, a_const, gb)
    else:
        quad = 0.5 * np.einsum("bi,bij,bj->b", gb, system.diffusion(xb), gb)
    out = np.einsum("bi,bi->b", f, gb) + quad
    return float(out[0]) if single else out


def assemble_qp_sets(attractor, colloc, regressions, cfg: QpTrainConfig,
                     largest_eps_density=None, expanded=None,
                     keep_artificial=False, artificial_clearance=0.25) -> QpTrainingSets:
    """Build (X1, X2, X3) from the attractor sample, the collocation set
    and the per-point regressions.

    Reliable points enter X2 with their fitted value.  The remaining
    collocation points (unreliable, or with empirical density at the
    largest noise level below the far-field threshold) receive the
    artificial value C so the far field is not left unconstrained.  When
    characteristic-curve data is supplied through ``expanded`` its points
    join X2 and the artificial points are dropped by default.  With
    keep_artificial=True the artificial points farther than
    ``artificial_clearance`` from every curve sample are retained: the
    curves carry real values where they reach, while the uncovered far
    field keeps its anti-flattening pressure.
    """
    points = colloc.points if hasattr(colloc, "points") else np.asarray(colloc)
    reliable_pts, reliable_targets = [], []
    far_pts = []
    for i in range(len(points)):
        r = regressions[i]
        if r is not None and r.reliable:
            reliable_pts.append(points[i])
            reliable_targets.append(r.v_hat)
        else:
            if largest_eps_density is None or largest_eps_density[i] < cfg.far_field_density:
                far_pts.append(points[i])
    if not reliable_pts:
        raise ValueError("no reliable regression targets for X2")
    reliable_pts = np.asarray(reliable_pts)
    reliable_targets = np.asarray(reliable_targets)

    c_value = cfg.artificial_value
    if c_value is None:
        c_value = 1.5 * float(np.percentile(reliable_targets, 95.0))

    x2 = [reliable_pts]
    t2 = [reliable_targets]
    art = [np.zeros(len(reliable_pts), dtype=bool)]
    ref = [np.ones(len(reliable_pts), dtype=bool)]
    exp_pts = None
    if expanded is not None:
        exp_pts, exp_v = (np.asarray(a) for a in expanded)
        if len(exp_pts):
            x2.append(exp_pts)
            t2.append(exp_v)
            art.append(np.zeros(len(exp_pts), dtype=bool))
            ref.append(np.zeros(len(exp_pts), dtype=bool))
    if far_pts and (expanded is None or keep_artificial):
        far_pts = np.asarray(far_pts)
        if exp_pts is not None and len(exp_pts):
            # keep only artificial points the curves do not already cover
            keep = np.ones(len(far_pts), dtype=bool)
            for i, q in enumerate(far_pts):
                keep[i] = np.min(np.linalg.norm(exp_pts - q, axis=1)) > artificial_clearance
            far_pts = far_pts[keep]
        if len(far_pts):
            x2.append(far_pts)
            t2.append(np.full(len(far_pts), c_value))
            art.append(np.ones(len(far_pts), dtype=bool))
            ref.append(np.zeros(len(far_pts), dtype=bool))

    x3 = points
    if cfg.residual_count is not None and cfg.residual_count < len(points):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
        keep = rng.choice(len(points), size=cfg.residual_count, replace=False)
        x3 = points[np.sort(keep)]

    sets = QpTrainingSets(
        x1=np.asarray(attractor.points),
        x2=np.concatenate(x2, axis=0),
        x2_targets=np.concatenate(t2),
        x2_artificial=np.concatenate(art),
        x3=np.asarray(x3),
        x2_is_reference=np.concatenate(ref),
    )
    sets.validate()
    return sets


def qp_loss(kind, params: MlpParams, batch, system):
    """Loss value and flat parameter gradient for one batch.

    ``batch`` is a point array for L1/L3 and a (points, targets) pair for
    L2.  The hinge subgradient at exactly zero is taken as zero.  Every
    gradient carries the L2 weight penalty once.
    """
    if kind == "L1":
        x = np.asarray(batch)
        v = net.forward(params, x)
        value = float(np.mean(v**2 + np.maximum(0.0, -v)))
        upstream = (2.0 * v - (v < 0.0)) / v.shape[0]
        return value, net.grad_params(params, x, upstream)
    if kind == "L2":
        x, targets = batch
        x = np.asarray(x)
        v = net.forward(params, x)
        diff = v - np.asarray(targets)
        value = float(np.mean(diff**2 + np.maximum(0.0, -v)))
        upstream = (2.0 * diff - (v < 0.0)) / v.shape[0]
        return value, net.grad_params(params, x, upstream)
    if kind == "L3":
        x = np.asarray(batch)
        g = net.grad_input(params, x)
        f = system.drift(x)
        a_const = system.constant_diffusion
        if a_const is not None:
            ag = g @ a_const.T
        else:
            ag = np.einsum("bij,bj->bi", system.diffusion(x), g)
        resid = np.einsum("bi,bi->b", f, g) + 0.5 * np.einsum("bi,bi->b", g, ag)
        value = float(np.mean(resid**2))
        coeff = 2.0 * resid / x.shape[0]
        grad = net.grad_params_of_directional_input_grad(params, x, f + ag, coeff)
        grad += params.l2_gradient()
        return value, grad
    raise ValueError(f"unknown loss kind {kind!r}")


def _epoch_indices(rng, size, n_batches, batch_size):
    # One shuffle per epoch; shorter sets recycle by wrapping the permutation.
    perm = rng.permutation(size)
    reps = int(np.ceil(n_batches * batch_size / size))
    stream = np.concatenate([perm] * reps)
    return [stream[k * batch_size:(k + 1) * batch_size] for k in range(n_batches)]


def alternating_adam(params, members, cfg, seed, fine_tune_members=(0, 2)):
    """Run the alternating-Adam schedule over loss members.

    ``members`` is a list of (name, set_size, make_batch, loss_fn, lr).
    Per epoch the largest member defines the number of batch triples;
    smaller members recycle their shuffled stream.  After the main epochs
    the fine-tune members continue alone at a reduced rate.  Returns the
    per-epoch mean-loss log.  Raises TrainingDiverged on a non-finite
    loss.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    states = [AdamState.fresh(params, lr) for (_, _, _, _, lr) in members]
    log = []

    def sweep(epoch, active):
        n_batches = max(int(np.ceil(members[i][1] / cfg.batch_size)) for i in active)
        idx_streams = {i: _epoch_indices(rng, members[i][1], n_batches, cfg.batch_size)
                       for i in active}
        sums = {i: 0.0 for i in range(len(members))}
        for k in range(n_batches):
            for i in active:
                name, _, make_batch, loss_fn, _ = members[i]
                value, grad = loss_fn(params, make_batch(idx_streams[i][k]))
                if not np.isfinite(value):
                    raise TrainingDiverged(f"{name} became non-finite at epoch {epoch}",
                                           params=params)
                net.adam_step(states[i], params, grad)
                sums[i] += value
        log.append((epoch,) + tuple(sums[i] / n_batches if i in active else np.nan
                                    for i in range(len(members))))

    for epoch in range(cfg.epochs):
        sweep(epoch, tuple(range(len(members))))
    for i in fine_tune_members:
        states[i].lr *= cfg.fine_tune_factor
    for epoch in range(cfg.epochs, cfg.epochs + cfg.fine_tune_epochs):
        sweep(epoch, tuple(fine_tune_members))
    return log, states


def train_qp(sets: QpTrainingSets, cfg: QpTrainConfig, system,
             initial: MlpParams | None = None) -> TrainedQp:
    """Alternating Adam over (L1, L2, L3), then fine-tuning on L1 and L3.

    Passing ``initial`` continues from previously learned parameters
    (fresh optimizer state), which is how retraining after a training-set
    expansion proceeds: restarting from scratch would throw away the
    curriculum already learned near the attractor.
    """
    cfg.validate()
    sets.validate()
    if initial is not None:
        params = initial.copy()
    else:
        widths = cfg.widths or net.default_widths(system.dim_state)
        spec = MlpSpec(widths=widths, l2_lambda=cfg.l2_lambda)
        params = net.init_params(spec, seed=cfg.seed)

    members = [
        ("L1", sets.x1.shape[0], lambda idx: sets.x1[idx],
         lambda p, b: qp_loss("L1", p, b, system), cfg.lr1),
        ("L2", sets.x2.shape[0], lambda idx: (sets.x2[idx], sets.x2_targets[idx]),
         lambda p, b: qp_loss("L2", p, b, system), cfg.lr2),
        ("L3", sets.x3.shape[0], lambda idx: sets.x3[idx],
         lambda p, b: qp_loss("L3", p, b, system), cfg.lr3),
    ]
    log, _ = alternating_adam(params, members, cfg, cfg.seed, fine_tune_members=(0, 2))

    # Scale against the regression references only: curve-derived targets
    # inherit the previous network's scale and would bias the ratio.
    good = sets.x2_is_reference & ~sets.x2_artificial
    alpha = estimate_alpha(params, sets.x2[good], sets.x2_targets[good])
    return TrainedQp(params=params, alpha=alpha, log=log)


def estimate_alpha(params: MlpParams, points, targets,
                   floor=ALPHA_TARGET_FLOOR, min_points=ALPHA_MIN_POINTS) -> float:
    """Scale factor between the trained network and the regression targets.

    The Hamilton-Jacobi equation fixes V only up to a constant factor, so
    the network realizes alpha * V.  The median of the pointwise ratios
    over targets above a small floor is robust to stray outliers.
    """
    targets = np.asarray(targets, dtype=float)
    mask = targets > floor
    if mask.sum() < min_points:
        raise ValueError(f"only {int(mask.sum())} targets above {floor}; cannot estimate alpha")
    ratios = net.forward(params, np.asarray(points)[mask]) / targets[mask]
    alpha = float(np.median(ratios))
    if not np.isfinite(alpha) or alpha <= 0:
        raise ValueError(f"estimated alpha {alpha} is not a positive scale")
    return alpha
