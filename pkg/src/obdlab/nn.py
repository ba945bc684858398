"""Small deterministic MLP policies with hand-written reverse mode.

Besides ordinary backprop this module carries a forward-mode tangent through
the backward pass. That yields Hessian-vector products of the behavioral
cloning loss in the parameters, and the mixed second derivatives in the
training pairs, which is all that reverse accumulation through an unrolled
SGD loop needs. No general autodiff graph is built.

Parameters live in one flat float64 vector; layer ``l`` holds a weight matrix
of shape (out, in) and a bias of shape (out,), so a layer maps ``s -> W s + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from obdlab.errors import DomainError, NumericalAbort, ShapeError

POLICY_HEADER = "mlp-policy v1"
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpArch:
    """Layer widths from state dim to action dim, hidden activation, residual flag.

    With ``residual=True`` every hidden layer whose input and output widths
    match adds its input back (h <- h + act(W h + b)); the first and the output
    layer are never residual.
    """

    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    residual: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise DomainError(f"layer_dims must hold >= 2 positive ints, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(self.n_layers))

    def is_residual(self, l: int) -> bool:
        d = self.layer_dims
        return self.residual and 0 < l < self.n_layers - 1 and d[l] == d[l + 1]

    def views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat parameter (or gradient) vector into per-layer (W, b) views."""
        out, pos = [], 0
        d = self.layer_dims
        for l in range(self.n_layers):
            n_in, n_out = d[l], d[l + 1]
            W = flat[pos : pos + n_in * n_out].reshape(n_out, n_in)
            pos += n_in * n_out
            b = flat[pos : pos + n_out]
            pos += n_out
            out.append((W, b))
        return out

    @classmethod
    def mlp(cls, state_dim, action_dim, hidden=64, n_layers=4, **kw) -> MlpArch:
        """``n_layers`` linear layers, i.e. ``n_layers - 1`` hidden layers of width ``hidden``."""
        return cls((state_dim,) + (hidden,) * (n_layers - 1) + (action_dim,), **kw)


def init_params(arch: MlpArch, seed) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    theta = np.empty(arch.n_params)
    for l, (W, b) in enumerate(arch.views(theta)):
        bound = 1.0 / np.sqrt(arch.layer_dims[l])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return theta


@dataclass(frozen=True, eq=False)
class MlpPolicy:
    arch: MlpArch
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != self.arch.n_params:
            raise ShapeError(f"expected {self.arch.n_params} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise DomainError("policy parameters must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def init(cls, arch: MlpArch, seed) -> MlpPolicy:
        return cls(arch, init_params(arch, seed))

    @property
    def layers(self):
        return self.arch.views(self.theta)

    def __call__(self, states) -> np.ndarray:
        return forward(self, states)


# -- activations ---------------------------------------------------------------------


def _act(kind, z):
    """Return (value, first derivative, second derivative) of the activation."""
    if kind == "tanh":
        t = np.tanh(z)
        d1 = 1.0 - t * t
        return t, d1, -2.0 * t * d1
    pos = z > 0
    return np.where(pos, z, 0.0), pos.astype(np.float64), None


# -- core passes --------------------------------------------------------------------


@dataclass
class _Cache:
    inputs: list = field(default_factory=list)  # h_{l-1} fed to layer l
    d1: list = field(default_factory=list)
    d2: list = field(default_factory=list)
    out: np.ndarray | None = None


def _forward(arch: MlpArch, layers, X) -> _Cache:
    c = _Cache()
    h = X
    last = arch.n_layers - 1
    for l, (W, b) in enumerate(layers):
        c.inputs.append(h)
        z = h @ W.T + b
        if l == last:
            c.out = z
            break
        a, d1, d2 = _act(arch.activation, z)
        c.d1.append(d1)
        c.d2.append(d2)
        h = a + h if arch.is_residual(l) else a
    return c


def _backward(arch: MlpArch, layers, c: _Cache, g_out, grad_flat):
    """Accumulate dLoss/dtheta into ``grad_flat``; return dLoss/dinput."""
    grads = arch.views(grad_flat)
    g = g_out
    for l in range(arch.n_layers - 1, -1, -1):
        W, _ = layers[l]
        gz = g if l == arch.n_layers - 1 else g * c.d1[l]
        dW, db = grads[l]
        dW += gz.T @ c.inputs[l]
        db += gz.sum(axis=0)
        g_prev = gz @ W
        if arch.is_residual(l):
            g_prev = g_prev + g
        g = g_prev
    return g


def _tangent_forward(arch: MlpArch, layers, dlayers, c: _Cache):
    """Directional derivative of every pre-activation along a parameter direction."""
    dz_list, dh_list = [], []
    dh = np.zeros_like(c.inputs[0])
    last = arch.n_layers - 1
    for l, ((W, _), (dW, db)) in enumerate(zip(layers, dlayers)):
        dh_list.append(dh)
        dz = dh @ W.T + c.inputs[l] @ dW.T + db
        dz_list.append(dz)
        if l == last:
            break
        da = c.d1[l] * dz
        dh = da + dh if arch.is_residual(l) else da
    return dz_list, dh_list


def _tangent_backward(arch, layers, dlayers, c, dz_list, dh_list, g_out, dg_out, dgrad_flat):
    """Tangent of ``_backward`` along the same parameter direction."""
    dgrads = arch.views(dgrad_flat)
    g, dg = g_out, dg_out
    last = arch.n_layers - 1
    for l in range(last, -1, -1):
        W, _ = layers[l]
        dW_dir, _ = dlayers[l]
        if l == last:
            gz, dgz = g, dg
        else:
            gz = g * c.d1[l]
            dgz = dg * c.d1[l]
            if c.d2[l] is not None:
                dgz = dgz + g * c.d2[l] * dz_list[l]
        tW, tb = dgrads[l]
        tW += dgz.T @ c.inputs[l] + gz.T @ dh_list[l]
        tb += dgz.sum(axis=0)
        g_prev = gz @ W
        dg_prev = dgz @ W + gz @ dW_dir
        if arch.is_residual(l):
            g_prev = g_prev + g
            dg_prev = dg_prev + dg
        g, dg = g_prev, dg_prev
    return dg


@dataclass
class BcGrad:
    loss: float
    theta: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    # filled only when a parameter direction is supplied
    hvp_theta: np.ndarray | None = None
    hvp_states: np.ndarray | None = None
    hvp_actions: np.ndarray | None = None


def weighted_bc_grad(arch, theta, X, A, weights=None, direction=None) -> BcGrad:
    """Loss mean_i w_i ||pi(x_i) - a_i||^2 with all first derivatives.

    When ``direction`` (a flat parameter vector v) is given, also returns the
    derivative of (grad_theta, grad_X, grad_A) along theta + t v, i.e. H v in
    each block.
    """
    layers = arch.views(theta)
    c = _forward(arch, layers, X)
    resid = c.out - A
    n = X.shape[0]
    coef = np.full((n, 1), 2.0 / n) if weights is None else (2.0 / n) * weights[:, None]
    sq = (resid * resid).sum(axis=1)
    loss = float(sq.mean() if weights is None else (weights * sq).mean())
    g_out = coef * resid
    gtheta = np.zeros(arch.n_params)
    gX = _backward(arch, layers, c, g_out, gtheta)
    out = BcGrad(loss, gtheta, gX, -g_out)
    if direction is not None:
        dlayers = arch.views(direction)
        dz, dh = _tangent_forward(arch, layers, dlayers, c)
        dg_out = coef * dz[-1]
        hv = np.zeros(arch.n_params)
        out.hvp_states = _tangent_backward(arch, layers, dlayers, c, dz, dh, g_out, dg_out, hv)
        out.hvp_theta = hv
        out.hvp_actions = -dg_out
    return out


# -- public policy operations ----------------------------------------------------------


def forward(policy: MlpPolicy, states) -> np.ndarray:
    """Actions for a single state (D,) or a batch (N, D)."""
    x = np.asarray(states, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != policy.arch.layer_dims[0]:
        raise ShapeError(f"state dim {X.shape[1]} != policy input {policy.arch.layer_dims[0]}")
    out = _forward(policy.arch, policy.layers, X).out
    return out[0] if single else out


def bc_loss(policy: MlpPolicy, pairs, weights=None) -> float:
    """mean_i w_i ||pi(s_i) - a_i||^2 (squared norm summed over action dims)."""
    if len(pairs.states) == 0:
        raise DomainError("behavior set is empty")
    resid = forward(policy, pairs.states) - pairs.actions
    sq = (resid * resid).sum(axis=1)
    return float(sq.mean() if weights is None else (np.asarray(weights) * sq).mean())


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled (AdamW) when > 0


def _descend(arch, theta, X, A, steps, opt, seed, batch_size, losses):
    rng = np.random.default_rng(seed)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(steps):
        if batch_size is not None and batch_size < len(X):
            idx = rng.choice(len(X), size=batch_size, replace=False)
            g = weighted_bc_grad(arch, theta, X[idx], A[idx])
        else:
            g = weighted_bc_grad(arch, theta, X, A)
        losses[t] = g.loss
        if not np.isfinite(g.loss) or not np.all(np.isfinite(g.theta)):
            raise NumericalAbort("non-finite behavioral cloning loss", step=t)
        if isinstance(opt, AdamConfig):
            m = opt.beta1 * m + (1 - opt.beta1) * g.theta
            v = opt.beta2 * v + (1 - opt.beta2) * g.theta**2
            m_hat = m / (1 - opt.beta1 ** (t + 1))
            v_hat = v / (1 - opt.beta2 ** (t + 1))
            if opt.weight_decay:
                theta = theta - opt.learning_rate * opt.weight_decay * theta
            theta = theta - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
        else:
            m = opt.momentum * m + g.theta
            theta = theta - opt.learning_rate * m
    return theta


def train_bc(
    policy: MlpPolicy,
    pairs,
    steps: int,
    opt: SgdConfig | AdamConfig = SgdConfig(),
    seed=0,
    batch_size: int | None = None,
) -> tuple[MlpPolicy, np.ndarray]:
    """Behavioral cloning by gradient descent.

    Full batch by default, in which case ``seed`` is unused and the run is
    fully deterministic. SGD uses the heavy-ball buffer ``v <- m v + g``,
    ``theta <- theta - lr v``. Returns the trained policy and the loss before
    every step followed by the final loss (length ``steps + 1``).
    """
    if steps < 0:
        raise DomainError("steps must be >= 0")
    if len(pairs.states) == 0:
        raise DomainError("behavior set is empty")
    arch = policy.arch
    X, A = pairs.states, pairs.actions
    losses = np.empty(steps + 1)
    # overflow is detected explicitly and reported with its step
    with np.errstate(over="ignore", invalid="ignore"):
        theta = _descend(arch, policy.theta.copy(), X, A, steps, opt, seed, batch_size, losses)
        losses[steps] = weighted_bc_grad(arch, theta, X, A).loss
    if not np.isfinite(losses[steps]):
        raise NumericalAbort("non-finite behavioral cloning loss", step=steps)
    return MlpPolicy(arch, theta), losses


# -- differentiation through the inner loop ----------------------------------------------

# (predictions, batch) -> (loss value, d loss / d predictions)
OuterLoss = Callable[[np.ndarray, object], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class UnrollSpec:
    arch: MlpArch
    inner_steps: int
    inner_sgd: SgdConfig = SgdConfig()
    init_seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 0:
            raise DomainError("inner_steps must be >= 0")


@dataclass
class UnrolledGrad:
    value: float
    states: np.ndarray
    actions: np.ndarray
    policy: MlpPolicy | None = None


def _inner_loop(unroll: UnrollSpec, X, A, keep: bool):
    arch, cfg = unroll.arch, unroll.inner_sgd
    theta = init_params(arch, unroll.init_seed)
    snapshots = [theta]
    v = np.zeros_like(theta)
    for t in range(unroll.inner_steps):
        g = weighted_bc_grad(arch, theta, X, A).theta
        if not np.all(np.isfinite(g)):
            raise NumericalAbort("non-finite inner gradient", step=t)
        v = cfg.momentum * v + g
        theta = theta - cfg.learning_rate * v
        if keep:
            snapshots.append(theta)
    return theta, snapshots


def unrolled_value(unroll: UnrollSpec, syn, outer_loss_fn: OuterLoss, outer_batch) -> float:
    """Outer loss after running the inner loop on ``syn`` (no derivatives)."""
    theta, _ = _inner_loop(unroll, syn.states, syn.actions, keep=False)
    pred = _forward(unroll.arch, unroll.arch.views(theta), outer_batch.states).out
    return float(outer_loss_fn(pred, outer_batch)[0])


def unrolled_grad(unroll: UnrollSpec, syn, outer_loss_fn: OuterLoss, outer_batch) -> UnrolledGrad:
    """d outer_loss(pi_{theta_T}) / d(synthetic states, synthetic actions).

    The inner loop is T_in full-batch SGD (momentum) steps on the synthetic
    pairs from a fixed theta_0. All T_in parameter snapshots are stored, so
    memory grows linearly with T_in. Reverse accumulation walks back through
    them, using one Hessian-vector product per step.
    """
    arch, cfg = unroll.arch, unroll.inner_sgd
    X, A = syn.states, syn.actions
    theta_T, snaps = _inner_loop(unroll, X, A, keep=True)
    layers = arch.views(theta_T)
    c = _forward(arch, layers, outer_batch.states)
    value, g_pred = outer_loss_fn(c.out, outer_batch)
    if not np.isfinite(value):
        raise NumericalAbort("non-finite outer loss", step=unroll.inner_steps)
    theta_bar = np.zeros(arch.n_params)
    _backward(arch, layers, c, g_pred, theta_bar)
    v_bar = np.zeros_like(theta_bar)
    X_bar = np.zeros_like(X)
    A_bar = np.zeros_like(A)
    lr, beta = cfg.learning_rate, cfg.momentum
    for t in range(unroll.inner_steps - 1, -1, -1):
        # adjoint of the velocity v_{t+1}; it is also the adjoint of g_t
        v_tot = v_bar - lr * theta_bar
        hv = weighted_bc_grad(arch, snaps[t], X, A, direction=v_tot)
        theta_bar = theta_bar + hv.hvp_theta
        X_bar += hv.hvp_states
        A_bar += hv.hvp_actions
        v_bar = beta * v_tot
        if not np.all(np.isfinite(theta_bar)):
            raise NumericalAbort("non-finite adjoint", step=t)
    return UnrolledGrad(float(value), X_bar, A_bar, MlpPolicy(arch, theta_T))


def finite_diff_grad(unroll: UnrollSpec, syn, outer_loss_fn: OuterLoss, outer_batch, h=1e-5) -> UnrolledGrad:
    """Central differences of ``unrolled_value`` in every synthetic coordinate."""
    if not h > 0:
        raise DomainError("h must be > 0")
    from obdlab.sets import SynSet

    base = SynSet(syn.states, syn.actions)
    grads = []
    for name in ("states", "actions"):
        arr = getattr(base, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = unrolled_value(unroll, base, outer_loss_fn, outer_batch)
            arr[idx] = orig - h
            down = unrolled_value(unroll, base, outer_loss_fn, outer_batch)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    value = unrolled_value(unroll, base, outer_loss_fn, outer_batch)
    return UnrolledGrad(value, grads[0], grads[1])


def squared_error_loss(weights=None) -> OuterLoss:
    """Outer loss mean_i w_i ||pred_i - a_i||^2 against ``batch.actions``."""

    def loss(pred, batch):
        resid = pred - batch.actions
        n = len(resid)
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        value = float((w * (resid * resid).sum(axis=1)).mean())
        return value, (2.0 / n) * w[:, None] * resid

    return loss


# -- checkpoint format -------------------------------------------------------------------


def save_policy(policy: MlpPolicy, path) -> None:
    arch = policy.arch
    lines = [POLICY_HEADER, " ".join(str(d) for d in arch.layer_dims)]
    lines.append(arch.activation + (" residual" if arch.residual else ""))
    for W, b in policy.layers:
        lines += [" ".join(repr(float(x)) for x in row) for row in W]
        lines.append(" ".join(repr(float(x)) for x in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_policy(path) -> MlpPolicy:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != POLICY_HEADER:
        raise DomainError(f"{path}: missing '{POLICY_HEADER}' header")
    dims = tuple(int(x) for x in lines[1].split())
    tags = lines[2].split()
    arch = MlpArch(dims, tags[0], residual="residual" in tags[1:])
    values = np.array(" ".join(lines[3:]).split(), dtype=np.float64)
    if values.size != arch.n_params:
        raise ShapeError(f"{path}: expected {arch.n_params} parameters, found {values.size}")
    # row-major W rows followed by b per layer matches the flat layout
    return MlpPolicy(arch, values)
