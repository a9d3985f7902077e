"""The latent-variable model.

A recognition network maps observations to a diagonal Gaussian over
latent codes. The generative side decodes a latent point to a Gaussian
over observations whose mean comes from a dense network and whose
precision comes from a non-negative combination of radial basis
functions, so variance grows smoothly away from the latent regions the
basis covers. The training objective is the importance-weighted bound.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tape
from .errors import (
    CalibrationFailedError,
    DegenerateCentersError,
    InvalidArgumentError,
    NumericalError,
)
from .network import (
    NetworkSpec,
    ParamSet,
    fc,
    forward,
    init_params,
    input_jacobian,
    input_jacobian_batch,
    mlp_spec,
    residual,
    tape_forward,
    tape_forward_jvp,
    tape_layer_params,
)
from .tape import Var, const

Array = np.ndarray

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_finite_rows(x: Array, what: str) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        bad = np.argwhere(~np.isfinite(x))[0]
        raise InvalidArgumentError(f"{what} contains a non-finite entry at {tuple(bad)}")
    return x


@dataclass
class RecognitionModel:
    """Encoder: shared trunk, linear mean head, softplus std head."""

    trunk: NetworkSpec
    mean_head: NetworkSpec
    std_head: NetworkSpec
    trunk_params: ParamSet
    mean_params: ParamSet
    std_params: ParamSet

    @property
    def n_x(self) -> int:
        return self.trunk.n_in

    @property
    def n_z(self) -> int:
        return self.mean_head.n_out

    def encode(self, x: Array) -> tuple[Array, Array]:
        """Latent mean and standard deviation for one point or a batch."""
        x = _check_finite_rows(x, "encoder input")
        h = forward(self.trunk, self.trunk_params, x)
        mean = forward(self.mean_head, self.mean_params, h)
        std = forward(self.std_head, self.std_params, h)
        return mean, std

    def copy(self) -> "RecognitionModel":
        return replace(
            self,
            trunk_params=self.trunk_params.copy(),
            mean_params=self.mean_params.copy(),
            std_params=self.std_params.copy(),
        )


def make_recognition(n_x: int, n_z: int, hidden: int = 512, depth: int = 2,
                     activation: str = "tanh", *, rng: np.random.Generator) -> RecognitionModel:
    trunk = mlp_spec(n_x, (hidden,) * (depth - 1), hidden, activation, activation)
    mean_head = NetworkSpec(hidden, (fc(n_z, "linear"),))
    std_head = NetworkSpec(hidden, (fc(n_z, "softplus"),))
    return RecognitionModel(
        trunk, mean_head, std_head,
        init_params(trunk, rng), init_params(mean_head, rng), init_params(std_head, rng),
    )


def rbf_bandwidths(centers: Array, alpha: float = 1.0, divisor: str = "count") -> Array:
    """Per-center inverse-square length scales from mean center spacing.

    lambda_k = alpha * (sum_i ||c_k - c_i|| / d)^(-2) with d the number
    of centers ("count") or the 1-based center index ("index"); the
    former keeps every bandwidth on the scale of the average spacing,
    the latter is kept selectable for comparison runs.
    """
    centers = np.asarray(centers, dtype=np.float64)
    k = centers.shape[0]
    if k < 2:
        raise DegenerateCentersError("bandwidths need at least two centers")
    if divisor not in ("count", "index"):
        raise InvalidArgumentError(f"unknown bandwidth divisor {divisor!r}")
    if alpha <= 0:
        raise InvalidArgumentError(f"alpha must be positive, got {alpha}")
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))
    sums = dist.sum(axis=1)
    if np.any(sums <= 0):
        raise DegenerateCentersError("a center coincides with all others (zero spread)")
    denom = float(k) if divisor == "count" else np.arange(1, k + 1, dtype=np.float64)
    return alpha * (sums / denom) ** -2.0


def kmeans_centers(points: Array, k: int, rng: np.random.Generator,
                   max_iters: int = 100) -> Array:
    """Lloyd's algorithm seeded by k distinct data points.

    Empty clusters are reseeded at the point currently farthest from its
    assigned center, which never increases the objective.
    """
    points = _check_finite_rows(points, "k-means input")
    if points.ndim != 2:
        raise InvalidArgumentError("k-means expects a 2-D array of points")
    if k < 1:
        raise InvalidArgumentError(f"k must be positive, got {k}")
    distinct = np.unique(points, axis=0)
    if distinct.shape[0] < k:
        raise DegenerateCentersError(
            f"need {k} distinct points, only {distinct.shape[0]} available"
        )
    pick = rng.choice(distinct.shape[0], size=k, replace=False)
    centers = distinct[pick].copy()
    assign = np.full(points.shape[0], -1)
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        closest = d2[np.arange(points.shape[0]), new_assign]
        for j in range(k):
            mask = new_assign == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            else:
                far = int(np.argmax(closest))
                centers[j] = points[far]
                new_assign[far] = j
                closest[far] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centers


@dataclass
class GenerativeModel:
    """Decoder: dense mean network plus RBF precision over observations."""

    mean_net: NetworkSpec
    mean_params: ParamSet
    centers: Array        # (n_centers, n_z)
    bandwidths: Array     # (n_centers,)
    weights: Array        # (n_x, n_centers), non-negative
    alpha: float = 1.0
    precision_floor: float = 1e-6
    bandwidth_divisor: str = "count"

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.bandwidths = np.asarray(self.bandwidths, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 2:
            raise InvalidArgumentError("need a 2-D array of at least two centers")
        if self.bandwidths.shape != (self.centers.shape[0],):
            raise InvalidArgumentError("one bandwidth per center required")
        if np.any(self.bandwidths <= 0):
            raise InvalidArgumentError("bandwidths must be positive")
        if self.weights.ndim != 2 or self.weights.shape[1] != self.centers.shape[0]:
            raise InvalidArgumentError("weights must be (n_x, n_centers)")
        if np.any(self.weights < 0):
            raise InvalidArgumentError("precision weights must be non-negative")
        if self.precision_floor <= 0:
            raise InvalidArgumentError("precision floor must be positive")
        if self.mean_net.n_out != self.weights.shape[0]:
            raise InvalidArgumentError("mean network width and weight rows disagree")
        if self.mean_net.n_in != self.centers.shape[1]:
            raise InvalidArgumentError("mean network input and center dim disagree")

    @property
    def n_z(self) -> int:
        return self.mean_net.n_in

    @property
    def n_x(self) -> int:
        return self.mean_net.n_out

    def copy(self) -> "GenerativeModel":
        return replace(
            self,
            mean_params=self.mean_params.copy(),
            centers=self.centers.copy(),
            bandwidths=self.bandwidths.copy(),
            weights=self.weights.copy(),
        )

    def with_alpha(self, alpha: float) -> "GenerativeModel":
        """Same model with bandwidths rebuilt at a new scale factor."""
        return replace(
            self.copy(),
            alpha=float(alpha),
            bandwidths=rbf_bandwidths(self.centers, alpha, self.bandwidth_divisor),
        )

    def with_centers(self, centers: Array) -> "GenerativeModel":
        """Same model with new centers and refreshed bandwidths."""
        return replace(
            self.copy(),
            centers=np.asarray(centers, dtype=np.float64),
            bandwidths=rbf_bandwidths(centers, self.alpha, self.bandwidth_divisor),
        )

    def rbf_features(self, z: Array) -> Array:
        """v_k(z) = exp(-lambda_k ||z - c_k||), for one point or a batch."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None, :] if single else z
        diff = zb[:, None, :] - self.centers[None, :, :]
        r = np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))
        v = np.exp(-self.bandwidths[None, :] * r)
        return v[0] if single else v

    def precision(self, z: Array) -> Array:
        """Per-dimension precision, floored away from zero."""
        v = self.rbf_features(z)
        return np.maximum(v @ self.weights.T, self.precision_floor)

    def sigma(self, z: Array) -> Array:
        return 1.0 / np.sqrt(self.precision(z))

    def decode(self, z: Array) -> tuple[Array, Array]:
        """Observation mean and per-dimension variance at latent z."""
        z = _check_finite_rows(z, "decoder input")
        mean = forward(self.mean_net, self.mean_params, z)
        var = 1.0 / self.precision(z)
        return mean, var

    def mean_jacobian(self, z: Array) -> Array:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            return input_jacobian(self.mean_net, self.mean_params, z)
        return input_jacobian_batch(self.mean_net, self.mean_params, z)

    def sigma_jacobian(self, z: Array) -> Array:
        """Exact d(sigma)/dz via the chain rule through the RBF features.

        Where the precision sits at its floor the clamp is flat, so the
        derivative there is exactly zero. At a center the radius has no
        gradient; the subgradient 0 is used.
        """
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None, :] if single else z
        diff = zb[:, None, :] - self.centers[None, :, :]          # (B, K, n_z)
        r = np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))   # (B, K)
        v = np.exp(-self.bandwidths[None, :] * r)
        psi = v @ self.weights.T                                   # (B, n_x)
        # dv_k/dz = -lambda_k v_k (z - c_k) / r_k, zero at r = 0
        scale = np.where(r > 0.0, -self.bandwidths[None, :] * v / np.maximum(r, 1e-300), 0.0)
        dv = scale[:, :, None] * diff                              # (B, K, n_z)
        dpsi = np.matmul(self.weights, dv)                         # (B, n_x, n_z)
        active = (psi > self.precision_floor).astype(np.float64)
        psi_c = np.maximum(psi, self.precision_floor)
        jac = (-0.5 * psi_c ** -1.5 * active)[:, :, None] * dpsi
        return jac[0] if single else jac


def make_generative(n_x: int, n_z: int, *, hidden: int = 512, depth: int = 2,
                    activation: str = "tanh", out_activation: str = "softplus",
                    arch: str = "fc", n_centers: int = 32,
                    data_variance: Array | float = 1.0,
                    precision_floor: float = 1e-6, alpha: float = 1.0,
                    bandwidth_divisor: str = "count",
                    rng: np.random.Generator) -> GenerativeModel:
    """Fresh decoder with placeholder centers on the unit circle.

    Real centers come from k-means on encoded training data at the start
    of training; the placeholders just make the model well-formed.
    `arch` chooses the mean network body: plain fc stack, or residual
    blocks behind a linear input projection. Precision weights start
    uniform on [0, 2/(n_centers * mean_feature)] scaled to the given
    per-dimension data variance, so initial variances are in the right
    decade instead of hundreds of optimizer steps away.
    """
    if arch == "fc":
        mean_net = mlp_spec(n_z, (hidden,) * (depth - 1), n_x, activation, out_activation)
    elif arch == "residual":
        layers = [fc(hidden, "linear")]
        layers += [residual(hidden, activation) for _ in range(depth)]
        layers.append(fc(n_x, out_activation))
        mean_net = NetworkSpec(n_z, tuple(layers))
    else:
        raise InvalidArgumentError(f"unknown decoder arch {arch!r}")
    angles = np.linspace(0.0, 2.0 * np.pi, n_centers, endpoint=False)
    centers = np.zeros((n_centers, n_z))
    centers[:, 0] = np.cos(angles)
    centers[:, 1 % n_z] += np.sin(angles)
    var = np.broadcast_to(np.asarray(data_variance, dtype=np.float64), (n_x,))
    # mean feature value ~ exp(-1) for points near the centers
    scale = 2.0 / (n_centers * np.exp(-1.0) * np.maximum(var, 1e-3))
    weights = rng.uniform(0.0, 1.0, size=(n_x, n_centers)) * scale[:, None]
    return GenerativeModel(
        mean_net=mean_net,
        mean_params=init_params(mean_net, rng),
        centers=centers,
        bandwidths=rbf_bandwidths(centers, alpha, bandwidth_divisor),
        weights=weights,
        alpha=alpha,
        precision_floor=precision_floor,
        bandwidth_divisor=bandwidth_divisor,
    )


def _log_weights(rec: RecognitionModel, gen: GenerativeModel, x: Array, eps: Array) -> Array:
    """log w for each (sample, importance draw) pair, shape (B, K)."""
    b, k, n_z = eps.shape
    z_mean, z_std = rec.encode(x)
    z = z_mean[:, None, :] + z_std[:, None, :] * eps            # (B, K, n_z)
    z_flat = z.reshape(b * k, n_z)
    x_mean = forward(gen.mean_net, gen.mean_params, z_flat)
    psi = gen.precision(z_flat)
    x_rep = np.repeat(x, k, axis=0)
    log_px = -0.5 * np.sum(LOG_2PI - np.log(psi) + (x_rep - x_mean) ** 2 * psi, axis=1)
    log_pz = -0.5 * np.sum(LOG_2PI + z_flat**2, axis=1)
    log_qz = (
        -np.sum(np.log(z_std), axis=1)[:, None]
        - 0.5 * np.sum(eps**2, axis=2)
        - 0.5 * n_z * LOG_2PI
    )
    return (log_px + log_pz).reshape(b, k) - log_qz


def iwae_bound(rec: RecognitionModel, gen: GenerativeModel, x: Array,
               n_importance: int, rng: np.random.Generator) -> float:
    """Monte-Carlo importance-weighted bound, averaged over the batch."""
    x = _check_finite_rows(x, "observations")
    if x.ndim != 2:
        raise InvalidArgumentError("iwae_bound expects a batch of rows")
    if n_importance < 1:
        raise InvalidArgumentError(f"need at least one importance sample, got {n_importance}")
    eps = rng.standard_normal((x.shape[0], n_importance, rec.n_z))
    return iwae_bound_given_noise(rec, gen, x, eps)


def iwae_bound_given_noise(rec: RecognitionModel, gen: GenerativeModel,
                           x: Array, eps: Array) -> float:
    """The bound with the reparameterization noise pinned by the caller."""
    logw = _log_weights(rec, gen, x, eps)
    if not np.isfinite(logw).all():
        bad = np.argwhere(~np.isfinite(logw))[0]
        raise NumericalError(f"non-finite importance weight for sample {int(bad[0])}")
    m = logw.max(axis=1, keepdims=True)
    lse = m.squeeze(1) + np.log(np.exp(logw - m).sum(axis=1))
    return float(np.mean(lse) - np.log(eps.shape[1]))


def _rbf_precision_var(gen: GenerativeModel, z_flat: Var) -> Var:
    """Floored precision psi at tape nodes z_flat, weights as constants."""
    return _rbf_precision_var_w(gen, z_flat, const(gen.weights))


def _rbf_precision_var_w(gen: GenerativeModel, z_flat: Var, w: Var) -> Var:
    c = gen.centers
    zz = tape.vsum(tape.square(z_flat), axis=1, keepdims=True)       # (N, 1)
    cc = const((c * c).sum(axis=1)[None, :])                         # (1, K)
    cross = tape.matmul(z_flat, const(c.T.copy()))                   # (N, K)
    d2 = tape.clip_min(zz + cc - 2.0 * cross, 0.0)
    r = tape.sqrt(d2)
    v = tape.exp(const(-gen.bandwidths[None, :]) * r)
    psi = tape.matmul(v, tape.transpose(w))                          # (N, n_x)
    return tape.clip_min(psi, gen.precision_floor)


def iwae_gradients(rec: RecognitionModel, gen: GenerativeModel,
                   x: Array, eps: Array) -> tuple[float, dict[str, Array]]:
    """Bound and its gradients for one minibatch with pinned noise.

    Returns the scalar bound and ascent gradients for the recognition
    trunk/heads, the decoder mean network, and the precision weights.
    """
    x = _check_finite_rows(x, "observations")
    b, k, n_z = eps.shape
    trunk_leaves = tape_layer_params(rec.trunk, rec.trunk_params)
    mean_leaves = tape_layer_params(rec.mean_head, rec.mean_params)
    std_leaves = tape_layer_params(rec.std_head, rec.std_params)
    gen_leaves = tape_layer_params(gen.mean_net, gen.mean_params)
    w_leaf = tape.leaf(gen.weights)

    h = tape_forward(rec.trunk, trunk_leaves, const(x))
    z_mean = tape_forward(rec.mean_head, mean_leaves, h)
    z_std = tape_forward(rec.std_head, std_leaves, h)

    z = tape.reshape(z_mean, (b, 1, n_z)) + tape.reshape(z_std, (b, 1, n_z)) * const(eps)
    z_flat = tape.reshape(z, (b * k, n_z))

    x_mean = tape_forward(gen.mean_net, gen_leaves, z_flat)
    psi = _rbf_precision_var_w(gen, z_flat, w_leaf)

    x_rep = const(np.repeat(x, k, axis=0))
    resid = x_rep - x_mean
    log_px = -0.5 * tape.vsum(
        LOG_2PI - tape.log(psi) + tape.square(resid) * psi, axis=1
    )
    log_pz = -0.5 * tape.vsum(LOG_2PI + tape.square(z_flat), axis=1)
    log_q_const = const(-0.5 * np.sum(eps**2, axis=2) - 0.5 * n_z * LOG_2PI)
    log_q = tape.reshape(-tape.vsum(tape.log(z_std), axis=1), (b, 1)) + log_q_const

    logw = tape.reshape(log_px + log_pz, (b, k)) - log_q
    if not np.isfinite(logw.data).all():
        bad = np.argwhere(~np.isfinite(logw.data))[0]
        raise NumericalError(f"non-finite importance weight for sample {int(bad[0])}")
    bound = tape.vmean(tape.logsumexp(logw, axis=1)) - float(np.log(k))

    loss = -bound
    tape.backward(loss)

    def flat(spec, leaves):
        from .network import collect_param_grads

        return -collect_param_grads(spec, leaves)  # ascent direction

    w_grad = w_leaf.grad if w_leaf.grad is not None else np.zeros_like(gen.weights)
    grads = {
        "rec_trunk": flat(rec.trunk, trunk_leaves),
        "rec_mean": flat(rec.mean_head, mean_leaves),
        "rec_std": flat(rec.std_head, std_leaves),
        "gen_mean": flat(gen.mean_net, gen_leaves),
        "weights": -np.asarray(w_grad),
    }
    return float(bound.data), grads


def calibrate_alpha(gen: GenerativeModel, latent_means: Array,
                    tol: float = 1e-2, *, log_lo: float = -4.0, log_hi: float = 4.0,
                    max_iters: int = 200) -> float:
    """Bandwidth scale that balances the two Jacobian magnitudes.

    Finds alpha such that the largest absolute entry of the mean
    Jacobian over the given latent points matches that of the sigma
    Jacobian, by bisection on log10(alpha). The bracket is first scanned
    on a coarse grid because the sigma side can plateau (precision
    pinned at the floor) at both extremes, leaving the endpoint residuals
    with equal signs even though a crossing exists between them.
    """
    z = np.asarray(latent_means, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != gen.n_z:
        raise InvalidArgumentError("latent means must be (N, n_z)")
    if tol <= 0:
        raise InvalidArgumentError("tolerance must be positive")
    j_mean = np.abs(gen.mean_jacobian(z)).max()

    def residual(log_alpha: float) -> float:
        trial = gen.with_alpha(10.0**log_alpha)
        return float(np.abs(trial.sigma_jacobian(z)).max() - j_mean)

    grid = np.linspace(log_lo, log_hi, 33)
    values = [residual(g) for g in grid]
    lo = hi = None
    for i in range(len(grid) - 1):
        if values[i] == 0.0:
            return float(10.0 ** grid[i])
        if np.sign(values[i]) != np.sign(values[i + 1]):
            lo, hi = grid[i], grid[i + 1]
            f_lo = values[i]
            break
    if lo is None:
        raise CalibrationFailedError(
            f"no sign change in [1e{log_lo:.0f}, 1e{log_hi:.0f}]; "
            f"endpoint residuals {values[0]:.3g} and {values[-1]:.3g}"
        )
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        f_mid = residual(mid)
        if abs(f_mid) < tol:
            return float(10.0**mid)
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    raise CalibrationFailedError(
        f"bisection did not reach |residual| < {tol} in {max_iters} iterations"
    )
