"""Deep risk bound for networks mixing learned layers and known operators.

For a composition of ``L`` layers with Lipschitz constants ``l_1..l_L`` the
squared output error is bounded by ``sum_k A_k * E||e_k||^2`` where::

    A_1 = 2^(L-1) * prod_{j=2..L} l_j^2
    A_k = 2^(L-k+1) * prod_{j=k+1..L} l_j^2     (2 <= k <= L)

and ``A_1 = 1`` when ``L = 1``.  Learned layers contribute
``A_k * (C^2/n + kappa * p * ln(N) / N)``; known layers contribute nothing.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError


@dataclass(frozen=True)
class LayerSpec:
    lipschitz: float
    known: bool = False
    barron_c: float = 0.0
    width_n: float = 1.0
    params_p: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if not self.lipschitz >= 0:
            raise InputError(f"Lipschitz constant must be >= 0, got {self.lipschitz}")
        if self.known:
            return
        if not (self.barron_c >= 0 and self.width_n >= 1 and self.params_p >= 1 and self.kappa > 0):
            raise InputError(f"invalid learned-layer constants in {self}")
        if not all(math.isfinite(v) for v in (self.barron_c, self.width_n, self.params_p, self.kappa)):
            raise InputError(f"non-finite constants in {self}")

    def as_known(self):
        return LayerSpec(self.lipschitz, True, self.barron_c, self.width_n, self.params_p, self.kappa)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InputError("a network needs at least one layer")

    @property
    def lipschitz(self):
        return [layer.lipschitz for layer in self.layers]

    def with_known(self, index):
        """Copy with layer ``index`` (0-based) replaced by a known operator."""
        layers = list(self.layers)
        layers[index] = layers[index].as_known()
        return NetworkSpec(layers)


@dataclass(frozen=True)
class BoundReport:
    amplifications: list
    per_layer_terms: list
    total: float
    n: int

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("layer,amplification,term,total\n")
            for i, (a, t) in enumerate(zip(self.amplifications, self.per_layer_terms), 1):
                fh.write(f"{i},{a:.17g},{t:.17g},{self.total:.17g}\n")


def amplification_factors(lipschitz):
    """Amplification factor of every layer; exact for ``int``/``Fraction`` input.

    ``lipschitz[0]`` never enters the result.
    """
    ell = list(lipschitz)
    L = len(ell)
    if L < 1:
        raise InputError("need at least one layer")
    if any(v < 0 for v in ell):
        raise InputError("Lipschitz constants must be >= 0")
    if L == 1:
        return [1]
    sq = [v * v for v in ell]
    out = [2 ** (L - 1) * math.prod(sq[1:])]
    for k in range(2, L + 1):
        out.append(2 ** (L - k + 1) * math.prod(sq[k:]))
    return out


def layer_risk(c, n, kappa, p, n_samples):
    """``C^2/n + kappa * p * ln(N) / N`` (natural log)."""
    if n_samples < 2:
        raise InputError(f"need N >= 2 training samples, got {n_samples}")
    if n < 1 or p < 1 or not kappa > 0:
        raise InputError("need n >= 1, p >= 1 and kappa > 0")
    return c * c / n + kappa * p * math.log(n_samples) / n_samples


def deep_risk_bound(net, n_samples):
    if n_samples < 2:
        raise InputError(f"need N >= 2 training samples, got {n_samples}")
    amps = amplification_factors(net.lipschitz)
    terms = []
    for a, layer in zip(amps, net.layers):
        if layer.known:
            terms.append(0.0)
        else:
            risk = layer_risk(layer.barron_c, layer.width_n, layer.kappa, layer.params_p, n_samples)
            terms.append(a * risk)
    return BoundReport(list(amps), terms, math.fsum(terms), n_samples)


def lipschitz_product(lipschitz):
    return math.prod(lipschitz)


def ct_amplifications(norm_k, norm_at):
    """Amplifications of the four FBP layers ``W, K, A^T, ReLU``."""
    if norm_k < 0 or norm_at < 0:
        raise InputError("operator norms must be >= 0")
    k2, a2 = norm_k * norm_k, norm_at * norm_at
    return (8 * k2 * a2, 8 * a2, 4, 2)


def recursion_defect(lipschitz):
    """Largest relative violation of the layer-to-layer recursion of the factors.

    Checks ``2 l_l^2 A_k^(l-1) == A_k^(l)`` for ``k < l``, ``A_l^(l) == 2`` for
    ``l >= 2`` and ``A_1^(1) == 1`` over every prefix of ``lipschitz``.
    """
    ell = list(lipschitz)
    worst = abs(amplification_factors(ell[:1])[0] - 1)
    prev = amplification_factors(ell[:1])
    for l in range(2, len(ell) + 1):
        cur = amplification_factors(ell[:l])
        worst = max(worst, abs(cur[-1] - 2) / 2)
        for k in range(l - 1):
            expected = 2 * ell[l - 1] ** 2 * prev[k]
            scale = max(abs(cur[k]), abs(expected))
            if scale:
                worst = max(worst, abs(cur[k] - expected) / scale)
        prev = cur
    return worst


@dataclass(frozen=True, eq=False)
class LinearLayer:
    """``z -> W z``, optionally followed by ReLU (which does not raise the Lipschitz constant)."""

    matrix: np.ndarray
    relu: bool = False

    def __call__(self, z):
        out = z @ self.matrix.T
        return np.maximum(out, 0.0) if self.relu else out

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.matrix, 2))


@dataclass(frozen=True, eq=False)
class ConcreteNetwork:
    true_layers: list
    learned_layers: list
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        if len(self.true_layers) != len(self.learned_layers) or not self.true_layers:
            raise InputError("true and learned layer lists must be non-empty and equal length")

    @property
    def depth(self):
        return len(self.true_layers)

    def lipschitz_constants(self):
        return [layer.lipschitz for layer in self.true_layers]

    def sample_inputs(self, n, rng):
        u = rng.random((n, len(self.low)))
        return self.low + u * (self.high - self.low)

    def forward(self, x, learned=False):
        layers = self.learned_layers if learned else self.true_layers
        for layer in layers:
            x = layer(x)
        return x


@dataclass
class VerificationReport:
    max_violation: float
    lhs: np.ndarray
    rhs: np.ndarray
    layer_errors: np.ndarray = field(repr=False)
    amplifications: list = field(default_factory=list)

    @property
    def ok(self):
        return self.max_violation <= 1e-9


def verify_pointwise_bound(net, n_inputs, rng):
    """Evaluate both sides of the pointwise error inequality on random inputs.

    ``layer_errors[i, k]`` is ``||e_k(f_hat_{k-1}(x_i))||^2``: the layer error
    is taken at the learned network's intermediate point.
    """
    amps = amplification_factors(net.lipschitz_constants())
    x = net.sample_inputs(n_inputs, rng)
    z_hat = x
    errs = np.empty((n_inputs, net.depth))
    for k, (u, u_hat) in enumerate(zip(net.true_layers, net.learned_layers)):
        errs[:, k] = np.sum((u(z_hat) - u_hat(z_hat)) ** 2, axis=1)
        z_hat = u_hat(z_hat)
    lhs = np.sum((net.forward(x) - z_hat) ** 2, axis=1)
    rhs = errs @ np.asarray(amps, dtype=float)
    if not (np.all(np.isfinite(lhs)) and np.all(np.isfinite(rhs))):
        raise NumericError("non-finite network evaluation")
    return VerificationReport(float(np.max(lhs - rhs)), lhs, rhs, errs, amps)


def random_concrete_network(rng, n_layers, max_dim=16, perturbation=0.1, relu_prob=0.5):
    """Random linear(+ReLU) chain whose learned layers are perturbed copies of the true ones."""
    dims = [1 + rng.below(max_dim) for _ in range(n_layers + 1)]
    true, learned = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        scale = 0.5 + 1.5 * rng.uniform()
        w = scale * (2.0 * rng.random((d_out, d_in)) - 1.0) / math.sqrt(d_in)
        use_relu = rng.uniform() < relu_prob
        noise = perturbation * (2.0 * rng.random((d_out, d_in)) - 1.0) / math.sqrt(d_in)
        true.append(LinearLayer(w, use_relu))
        learned.append(LinearLayer(w + noise, use_relu))
    low, high = -np.ones(dims[0]), np.ones(dims[0])
    return ConcreteNetwork(true, learned, low, high)


def estimate_lipschitz_empirical(f, low, high, n_pairs, rng):
    """Largest ``||f(x) - f(x')|| / ||x - x'||`` over random pairs in a box (a lower bound)."""
    if n_pairs < 1:
        raise InputError("need at least one pair")
    low, high = np.asarray(low, dtype=float), np.asarray(high, dtype=float)
    a = low + rng.random((n_pairs, low.size)) * (high - low)
    b = low + rng.random((n_pairs, low.size)) * (high - low)
    dx = np.linalg.norm(a - b, axis=1)
    keep = dx > 0
    if not np.any(keep):
        return 0.0
    df = np.linalg.norm(f(a[keep]) - f(b[keep]), axis=1)
    return float(np.max(df / dx[keep]))
