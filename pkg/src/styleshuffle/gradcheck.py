"""Central finite-difference verification of every differentiable primitive
plus the composed overall loss.

Each registered check builds a small random instance, runs one backward
pass, and compares every analytic gradient against central differences
(step 1e-5 at float64). Relative error uses max(1, |analytic|, |numeric|)
as the denominator. The composed loss is checked per-element on a micro
config and along random directions on the full tiny config, where
per-element differencing would be needlessly slow.

``run_all`` accepts a ``corrupt`` op name used by the self-test harness: the
named check's analytic gradients are scaled by 1.02 before comparison,
which a working detector must flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .assembly import SalParams, sal_forward, sample_permutation, style_to_params
from .data import SynthSpec, synth_dataset
from .losses import LossWeights, contrastive_loss
from .model import ModelConfig, StyleAssemblyNet, tiny_config
from .normalization import BatchNormState, StyleParams, adain, batch_norm, instance_stats
from .training import compute_losses
from .data import collate, domain_index_map

FD_STEP = 1e-5
TOLERANCE = 1e-4
DEFAULT_SEEDS = 10


@dataclass
class CheckResult:
    name: str
    worst_rel_err: float

    @property
    def ok(self) -> bool:
        return self.worst_rel_err < TOLERANCE


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def fd_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of f with respect to every element of x (in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def _check_op(build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]],
              seed: int, tamper: float) -> float:
    """Compare backward grads of a scalar-loss builder against FD, per input."""
    rng = np.random.default_rng(seed)
    loss_fn, inputs = build(rng)
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)) * tamper
        numeric = fd_grad(lambda: loss_fn().item(), t.data)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    w = Tensor(rng.normal(size=out.shape))
    return ad.tsum(ad.mul_elem(out, w))


# --- individual primitive checks -------------------------------------------

def _mk_add(rng):
    a = Tensor(rng.normal(size=(3, 4, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 4, 1, 1)), requires_grad=True)   # broadcast
    return (lambda: _weighted_sum(ad.add(a, b), np.random.default_rng(0)), [a, b])


def _mk_sub(rng):
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5,)), requires_grad=True)
    return (lambda: _weighted_sum(ad.sub(a, b), np.random.default_rng(1)), [a, b])


def _mk_mul(rng):
    a = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 1, 1)), requires_grad=True)
    return (lambda: _weighted_sum(ad.mul_elem(a, b), np.random.default_rng(2)), [a, b])


def _mk_scalar_mul(rng):
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    return (lambda: _weighted_sum(ad.scalar_mul(a, -1.7), np.random.default_rng(3)), [a])


def _mk_div(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)), requires_grad=True)
    return (lambda: _weighted_sum(ad.div(a, b), np.random.default_rng(4)), [a, b])


def _mk_matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    return (lambda: _weighted_sum(ad.matmul(a, b), np.random.default_rng(5)), [a, b])


def _mk_conv_s1(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    return (lambda: _weighted_sum(ad.conv2d(x, k, 1, 1), np.random.default_rng(6)), [x, k])


def _mk_conv_s2(rng):
    x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    return (lambda: _weighted_sum(ad.conv2d(x, k, 2, 1), np.random.default_rng(7)), [x, k])


def _mk_relu(rng):
    vals = rng.normal(size=(4, 4))
    vals[np.abs(vals) < 0.1] += 0.3    # keep FD away from the kink
    x = Tensor(vals, requires_grad=True)
    return (lambda: _weighted_sum(ad.relu(x), np.random.default_rng(8)), [x])


def _mk_sigmoid(rng):
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    return (lambda: _weighted_sum(ad.sigmoid(x), np.random.default_rng(9)), [x])


def _mk_sqrt(rng):
    x = Tensor(rng.uniform(0.2, 3.0, size=(3, 4)), requires_grad=True)
    return (lambda: _weighted_sum(ad.sqrt(x), np.random.default_rng(10)), [x])


def _mk_gap(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    return (lambda: _weighted_sum(ad.global_avg_pool(x), np.random.default_rng(11)), [x])


def _mk_avg_pool(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    return (lambda: _weighted_sum(ad.avg_pool2(x), np.random.default_rng(12)), [x])


def _mk_upsample(rng):
    x = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    return (lambda: _weighted_sum(ad.upsample_nearest(x, 2), np.random.default_rng(13)), [x])


def _mk_reshape_sum(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

    def loss():
        y = ad.reshape(x, (2, 12))
        return _weighted_sum(ad.tsum(y, axis=1, keepdims=True), np.random.default_rng(14))

    return (loss, [x])


def _mk_concat_slice(rng):
    a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def loss():
        y = ad.concat([a, b], axis=1)
        return _weighted_sum(ad.slice_cols(y, 1, 5), np.random.default_rng(15))

    return (loss, [a, b])


def _mk_take_rows(rng):
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    idx = np.array([2, 0, 0, 3, 1])

    def loss():
        return _weighted_sum(ad.take_rows(x, idx), np.random.default_rng(16))

    return (loss, [x])


def _mk_batch_norm(rng):
    x = Tensor(rng.normal(size=(4, 3, 2, 2)), requires_grad=True)
    state = BatchNormState.create(3)
    state.gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    state.beta = Tensor(rng.normal(size=3), requires_grad=True)

    def loss():
        return _weighted_sum(batch_norm(x, state, training=True),
                             np.random.default_rng(17))

    return (loss, [x, state.gamma, state.beta])


def _mk_instance_stats(rng):
    x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)

    def loss():
        mu, sigma = instance_stats(x)
        r = np.random.default_rng(18)
        return ad.add(_weighted_sum(mu, r), _weighted_sum(sigma, r))

    return (loss, [x])


def _mk_adain(rng):
    x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)), requires_grad=True)
    beta = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def loss():
        return _weighted_sum(adain(x, StyleParams(gamma=gamma, beta=beta)),
                             np.random.default_rng(19))

    return (loss, [x, gamma, beta])


def _mk_style_to_params(rng):
    style = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    sal = SalParams.create(3, 4, 6, rng)

    def loss():
        p = style_to_params(style, sal)
        r = np.random.default_rng(20)
        return ad.add(_weighted_sum(p.gamma, r), _weighted_sum(p.beta, r))

    return (loss, [style, sal.w1, sal.b1, sal.w2, sal.b2])


def _mk_sal_forward(rng):
    content = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    style = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    sal = SalParams.create(3, 5, 6, rng)

    def loss():
        return _weighted_sum(sal_forward(content, style, sal),
                             np.random.default_rng(21))

    return (loss, [content, style])


def _mk_softmax_ce(rng):
    logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    labels = rng.integers(0, 3, size=4)
    return (lambda: ad.softmax_cross_entropy(logits, labels), [logits])


def _mk_mse(rng):
    pred = Tensor(rng.normal(size=(2, 1, 4, 4)), requires_grad=True)
    target = Tensor(rng.normal(size=(2, 1, 4, 4)))

    def loss():
        d = ad.sub(pred, target)
        return ad.tmean(ad.mul_elem(d, d))

    return (loss, [pred])


def _mk_contrastive(rng):
    a = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    labels = rng.integers(0, 2, size=4)
    perm = sample_permutation(4, int(rng.integers(0, 2 ** 32)))

    def loss():
        return contrastive_loss(a, b, labels, perm)

    return (loss, [b])


_OP_CHECKS: list[tuple[str, Callable]] = [
    ("add", _mk_add),
    ("sub", _mk_sub),
    ("mul_elem", _mk_mul),
    ("scalar_mul", _mk_scalar_mul),
    ("div", _mk_div),
    ("matmul", _mk_matmul),
    ("conv2d", _mk_conv_s1),
    ("conv2d_stride2", _mk_conv_s2),
    ("relu", _mk_relu),
    ("sigmoid", _mk_sigmoid),
    ("sqrt", _mk_sqrt),
    ("global_avg_pool", _mk_gap),
    ("avg_pool2", _mk_avg_pool),
    ("upsample_nearest", _mk_upsample),
    ("reshape_sum", _mk_reshape_sum),
    ("concat_slice", _mk_concat_slice),
    ("take_rows", _mk_take_rows),
    ("batch_norm", _mk_batch_norm),
    ("instance_stats", _mk_instance_stats),
    ("adain", _mk_adain),
    ("style_to_params", _mk_style_to_params),
    ("sal_forward", _mk_sal_forward),
    ("softmax_cross_entropy", _mk_softmax_ce),
    ("mse", _mk_mse),
    ("contrastive", _mk_contrastive),
]


# --- exact-contract checks --------------------------------------------------

def _check_grad_reverse(seed: int, tamper: float) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    loss = ad.tsum(ad.grad_reverse(ad.scalar_mul(x, 2.0), 0.5))
    loss.backward()
    expected = -np.ones_like(x.data)   # -0.5 * 2
    return rel_err(x.grad * tamper, expected)


def _check_stop_gradient(seed: int, tamper: float) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    loss = ad.tsum(ad.mul_elem(ad.stop_gradient(x), y))
    loss.backward()
    xg = x.grad if x.grad is not None else np.zeros_like(x.data)
    err_x = float(np.abs(xg).max(initial=0.0))          # must be exactly zero
    err_y = rel_err(y.grad * tamper, x.data)
    return max(err_x, err_y)


# --- composed-loss checks ----------------------------------------------------
#
# The overall loss contains the two gradient-manipulating pseudo-ops, whose
# reported gradients deliberately differ from the true derivative of the
# forward value (that is their entire purpose), so finite differences of the
# literal loss cannot match the engine. The composed check therefore
# differences the smooth twin of each piece and reassembles the expected
# training gradient: the contrastive term with its anchor frozen at the base
# point (what stop-gradient claims), and the adversarial term with identity
# in place of the reversal, scaled by -lambda_grl for every parameter that
# feeds the discriminator through content (what grad_reverse claims). The
# pseudo-op contracts themselves are checked exactly above.

def micro_config() -> ModelConfig:
    return ModelConfig(variant="binary_head", input_channels=1, input_size=8,
                       gen_widths=(2, 3), gen_pools=(1, 2), pyramid_taps=(0, 1),
                       content_width=4, style_width=5, sal_depth=1, sal_hidden=6,
                       disc_hidden=3, num_domains=2)


def _micro_batch(cfg: ModelConfig, rng: np.random.Generator, n: int = 2):
    spec = SynthSpec(num_domains=cfg.num_domains, side=cfg.input_size,
                     channels=cfg.input_channels, seed=int(rng.integers(0, 2 ** 31)),
                     spoof_patch=min(6, cfg.input_size))
    samples = synth_dataset(spec, max(1, n // (2 * cfg.num_domains)) )
    chunk = samples[:n] if len(samples) >= n else samples
    return collate(chunk, domain_index_map(samples),
                   with_depth=cfg.variant == "depth_head")


def _engine_grads(net: StyleAssemblyNet, batch, perm,
                  weights: LossWeights) -> dict[str, np.ndarray]:
    """Backward of the real training loss (reversal and stop-gradient live)."""
    ad.zero_grads(net.params.values())
    _, total, _ = compute_losses(net, batch, weights, perm, training=True)
    total.backward()
    return {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in net.params.items()}


def _twin_pieces(net: StyleAssemblyNet, batch, perm, weights: LossWeights):
    """Smooth twins of the loss pieces, suitable for finite differences.

    Piece A is cls + lambda2 * contrastive with the anchor frozen at the base
    point; piece B is the adversarial loss with identity in place of the
    reversal. The anchor constant is captured once, before any perturbation.
    """
    from .losses import adversarial_loss, classification_loss

    base = net.forward(batch.images, perm, training=True)
    anchor = ad.Tensor(ad.global_avg_pool(base.self_assembly).data.copy())

    def piece_a() -> float:
        out = net.forward(batch.images, perm, training=True)
        l_cls = classification_loss(out.class_pred, batch.live_labels, "binary_head")
        shuf_vec = ad.global_avg_pool(out.shuffle_assembly)
        l_contra = contrastive_loss(anchor, shuf_vec, batch.live_labels, perm,
                                    reduce=weights.contrastive_reduce)
        return ad.add(l_cls, ad.scalar_mul(l_contra, weights.lambda2)).item()

    def piece_b() -> float:
        out = net.forward(batch.images, perm, training=True, grl_identity=True)
        return adversarial_loss(out.domain_logits, batch.domain_labels).item()

    return piece_a, piece_b


def _adv_sign(net: StyleAssemblyNet, name: str) -> float:
    """Expected adversarial gradient scale: +1 behind the reversal (the
    discriminator head), -lambda_grl for everything upstream of it."""
    return 1.0 if name.startswith("disc.") else -net.cfg.lambda_grl


def _check_composed_micro(seed: int, tamper: float) -> float:
    rng = np.random.default_rng(seed)
    cfg = micro_config()
    net = StyleAssemblyNet(cfg, seed=seed)
    batch = _micro_batch(cfg, rng, n=4)
    perm = sample_permutation(batch.images.shape[0], seed + 1)
    weights = LossWeights()
    engine = _engine_grads(net, batch, perm, weights)
    piece_a, piece_b = _twin_pieces(net, batch, perm, weights)
    worst = 0.0
    for name, t in net.params.items():
        fd_a = fd_grad(piece_a, t.data)
        fd_b = fd_grad(piece_b, t.data)
        expected = fd_a + weights.lambda1 * _adv_sign(net, name) * fd_b
        worst = max(worst, rel_err(engine[name] * tamper, expected))
    return worst


def _check_composed_tiny(seed: int, tamper: float) -> float:
    """Directional finite differences through the full tiny-config loss."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(num_domains=2)
    net = StyleAssemblyNet(cfg, seed=seed)
    batch = _micro_batch_tiny(rng, cfg)
    perm = sample_permutation(batch.images.shape[0], seed + 3)
    weights = LossWeights()
    engine = _engine_grads(net, batch, perm, weights)
    piece_a, piece_b = _twin_pieces(net, batch, perm, weights)

    names = list(net.params)
    direction = {name: rng.normal(size=net.params[name].data.shape) for name in names}
    scale = 1.0 / np.sqrt(sum(float((d * d).sum()) for d in direction.values()))
    analytic = scale * sum(float((engine[n] * direction[n]).sum()) for n in names)

    def fd_dir(f, subset) -> float:
        def shift(sign):
            for n in subset:
                net.params[n].data = net.params[n].data \
                    + sign * FD_STEP * scale * direction[n]
        shift(+1.0)
        fp = f()
        shift(-2.0)
        fm = f()
        shift(+1.0)
        return (fp - fm) / (2 * FD_STEP)

    disc = [n for n in names if n.startswith("disc.")]
    trunk = [n for n in names if not n.startswith("disc.")]
    expected = fd_dir(piece_a, names) \
        + weights.lambda1 * fd_dir(piece_b, disc) \
        - weights.lambda1 * net.cfg.lambda_grl * fd_dir(piece_b, trunk)
    return rel_err(np.array([analytic * tamper]), np.array([expected]))


def _micro_batch_tiny(rng: np.random.Generator, cfg: ModelConfig):
    spec = SynthSpec(num_domains=cfg.num_domains, side=cfg.input_size,
                     channels=cfg.input_channels, seed=int(rng.integers(0, 2 ** 31)))
    samples = synth_dataset(spec, 1)
    return collate(samples, domain_index_map(samples), with_depth=False)


# --- suite driver -------------------------------------------------------------

def run_all(seed: int = 0, seeds_per_check: int = DEFAULT_SEEDS,
            corrupt: str | None = None) -> list[CheckResult]:
    """Run every registered check; returns results in registration order."""
    results = []
    for name, builder in _OP_CHECKS:
        tamper = 1.02 if name == corrupt else 1.0
        worst = 0.0
        for s in range(seeds_per_check):
            worst = max(worst, _check_op(builder, seed + s, tamper))
        results.append(CheckResult(name, worst))
    for name, fn, n_seeds in [
        ("grad_reverse", _check_grad_reverse, seeds_per_check),
        ("stop_gradient", _check_stop_gradient, seeds_per_check),
        ("composed_micro", _check_composed_micro, 2),
        ("composed_tiny", _check_composed_tiny, seeds_per_check),
    ]:
        tamper = 1.02 if name == corrupt else 1.0
        worst = 0.0
        for s in range(n_seeds):
            worst = max(worst, fn(seed + s, tamper))
        results.append(CheckResult(name, worst))
    return results
