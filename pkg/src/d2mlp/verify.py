"""Fixed desk-shape finite-difference suites behind `gradcheck` on the CLI.

Targets:
  ops      every differentiable primitive at small random shapes
  ddm      the full mixer module at C=8, N=2, H=W=6 (input and every parameter)
  block    one mixer block, train-mode BN, B=1, C=8, N=2, H=W=6
  network  combined_loss of the tiny network (C=8, input 64x64, 2 classes,
           deep supervision on) w.r.t. the input image; BN in eval mode so
           perturbed samples stay independent and finite differences can be
           evaluated in batches

All suites run in float64. A target passes when every max relative error is
below 1e-4.
"""

from __future__ import annotations

import numpy as np

from . import ddm as ddm_mod
from . import ops
from .gradcheck import gradcheck, gradcheck_params
from .network import NetworkConfig, BlockParams, build_network, forward, mixer_block
from .ops import BNState
from .tensor import Tensor
from .training import TrainConfig, combined_loss, ce_loss, dice_loss

__all__ = ["TOLERANCE", "run_target", "TARGETS"]

TOLERANCE = 1e-4


def _rand(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _proj(rng, shape) -> Tensor:
    """Fixed random projection so the scalarized objective has generic
    gradients (a plain sum is degenerate for softmax-like ops)."""
    return Tensor(rng.standard_normal(shape))


def _scalar(t: Tensor, r: Tensor) -> Tensor:
    return ops.tsum(ops.mul(t, r))


def _ops_checks(rng) -> list:
    checks = []

    def check(name, f, x0):
        checks.append((name, gradcheck(f, x0)))

    x = _rand(rng, (3, 4))
    y = _rand(rng, (3, 4))
    r = _proj(rng, (3, 4))
    check("add", lambda v: _scalar(ops.add(v, y), r), x)
    check("sub", lambda v: _scalar(ops.sub(y, v), r), x)
    check("mul", lambda v: _scalar(ops.mul(v, y), r), x)
    check("div", lambda v: _scalar(ops.div(y, ops.add(v, 5.0)), r), x)
    r_rows = _proj(rng, (3,))
    check("sum_axis", lambda v: _scalar(ops.tsum(v, axis=1), r_rows), x)
    check("mean", lambda v: ops.tmean(ops.mul(v, v)), x)

    xs = _rand(rng, (2, 3, 4))
    rl = _proj(rng, (2, 5, 4))
    wl = _rand(rng, (5, 3))
    bl = _rand(rng, (5,))
    check("linear", lambda v: _scalar(ops.linear(v, wl, bl, axis=1), rl), xs)

    xc = _rand(rng, (2, 3, 7, 6))
    wc = _rand(rng, (4, 3, 3, 3))
    bc = _rand(rng, (4,))
    rc = _proj(rng, (2, 4, 4, 3))
    check("conv2d", lambda v: _scalar(ops.conv2d(v, wc, bc, stride=2, padding=1), rc), xc)

    xt = _rand(rng, (2, 3, 4, 5))
    wt = _rand(rng, (3, 2, 2, 2))
    bt = _rand(rng, (2,))
    rt = _proj(rng, (2, 2, 8, 10))
    check("tconv2d", lambda v: _scalar(ops.tconv2d(v, wt, bt, stride=2), rt), xt)

    xd = _rand(rng, (2, 3, 5, 5))
    kd = _rand(rng, (3, 1, 3))
    bd = _rand(rng, (3,))
    rd = _proj(rng, (2, 3, 5, 5))
    check("dwconv2d", lambda v: _scalar(ops.dwconv2d(v, kd, bd), rd), xd)

    xg = _rand(rng, (4, 5))
    rg = _proj(rng, (4, 5))
    check("gelu", lambda v: _scalar(ops.gelu(v), rg), xg)
    check("gelu_tanh", lambda v: _scalar(ops.gelu(v, approx="tanh"), rg), xg)
    check("softmax", lambda v: _scalar(ops.softmax(v, axis=1), rg), xg)
    check("log_softmax", lambda v: _scalar(ops.log_softmax(v, axis=1), rg), xg)

    xb = _rand(rng, (2, 3, 4, 4))
    rb = _proj(rng, (2, 3, 4, 4))

    def bn_train(v):
        s = BNState.create(3, np.float64)
        s.gamma = Tensor(rng_gamma, requires_grad=True)
        s.beta = Tensor(rng_beta, requires_grad=True)
        return _scalar(ops.batchnorm2d(v, s, "train"), rb)

    rng_gamma = rng.standard_normal(3)
    rng_beta = rng.standard_normal(3)
    check("batchnorm_train", bn_train, xb)

    bn_eval_state = BNState.create(3, np.float64)
    bn_eval_state.running_mean = rng.standard_normal(3)
    bn_eval_state.running_var = rng.uniform(0.5, 2.0, 3)
    check("batchnorm_eval", lambda v: _scalar(ops.batchnorm2d(v, bn_eval_state, "eval"), rb), xb)

    xp = _rand(rng, (3, 4, 5))
    rp = _proj(rng, (3, 1, 1))
    check("global_avgpool", lambda v: _scalar(ops.global_avgpool(v), rp), xp)

    rperm = _proj(rng, (5, 3, 4))
    check("permute", lambda v: _scalar(ops.permute(v, (2, 0, 1)), rperm), xp)
    rre = _proj(rng, (12, 5))
    check("reshape", lambda v: _scalar(ops.reshape(v, (12, 5)), rre), xp)
    rcat = _proj(rng, (6, 4, 5))
    check("concat", lambda v: _scalar(ops.concat([v, ops.mul(v, 2.0)], axis=0), rcat), xp)
    rsp = _proj(rng, (3, 2, 5))
    check("split", lambda v: _scalar(ops.split(v, 2, axis=1)[1], rsp), xp)

    rfold = _proj(rng, (4 * 5, 2, 4))
    xf = _rand(rng, (8, 4, 5))
    check("fold_width", lambda v: _scalar(ddm_mod.fold_width(v, 2), rfold), xf)
    rfoldh = _proj(rng, (4 * 4, 2, 5))
    check("fold_height", lambda v: _scalar(ddm_mod.fold_height(v, 2), rfoldh), xf)

    lab = rng.integers(0, 3, (2, 6, 6))
    xl = _rand(rng, (2, 3, 6, 6))
    check("ce_loss", lambda v: ce_loss(v, lab), xl)
    check("dice_loss", lambda v: dice_loss(v, lab, eps=1e-5), xl)
    return checks


def _make_block(c, n, hw, rng) -> BlockParams:
    mixer = ddm_mod.DDMParams.create(c, n, hw, hw, rng, np.float64)
    ec = 4 * c
    return BlockParams(
        bn1=BNState.create(c, np.float64),
        mixer=mixer,
        bn2=BNState.create(c, np.float64),
        mlp_lin1_w=ddm_mod.he_uniform(rng, (ec, c), c, np.float64),
        mlp_lin1_b=Tensor(np.zeros(ec), requires_grad=True),
        mlp_lin2_w=ddm_mod.he_uniform(rng, (c, ec), ec, np.float64),
        mlp_lin2_b=Tensor(np.zeros(c), requires_grad=True),
    )


def _ddm_checks(rng) -> list:
    c, n, hw = 8, 2, 6
    params = ddm_mod.DDMParams.create(c, n, hw, hw, rng, np.float64)
    x = _rand(rng, (c, hw, hw))
    r = _proj(rng, (c, hw, hw))
    checks = [
        ("ddm_input", gradcheck(lambda v: _scalar(ddm_mod.ddm_forward(v, params), r), x)),
    ]
    named = dict(params.named_tensors("ddm"))
    err = gradcheck_params(
        lambda: _scalar(ddm_mod.ddm_forward(x, params), r), named.values()
    )
    checks.append(("ddm_params", err))
    return checks


def _block_checks(rng) -> list:
    c, n, hw = 8, 2, 6
    bp = _make_block(c, n, hw, rng)
    x = _rand(rng, (1, c, hw, hw))
    r = _proj(rng, (1, c, hw, hw))
    loss = lambda v: _scalar(mixer_block(v, bp, bn_mode="train"), r)
    checks = [("block_input", gradcheck(loss, x))]
    tensors = [bp.bn1.gamma, bp.bn1.beta, bp.bn2.gamma, bp.bn2.beta,
               bp.mlp_lin1_w, bp.mlp_lin1_b, bp.mlp_lin2_w, bp.mlp_lin2_b]
    tensors += [t for _, t in bp.mixer.named_tensors("m")]
    err = gradcheck_params(lambda: _scalar(mixer_block(x, bp, bn_mode="train"), r), tensors)
    checks.append(("block_params", err))
    return checks


def _network_checks(rng) -> list:
    cfg = NetworkConfig(
        base_channels=8, patch_count=2, num_classes=2, in_channels=1,
        input_size=64, deep_supervision=True,
    )
    params = build_network(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    labels = rng.integers(0, 2, (1, 64, 64))
    tcfg = TrainConfig(deep_supervision=True)
    x = _rand(rng, (1, 1, 64, 64))

    # Conditioning, not correctness: central differences at eps=1e-5 bottom
    # out at one ulp of the loss value, so the objective must stay O(1) and
    # no input coordinate may have a vanishing gradient share. Shrinking the
    # prediction heads keeps the loss near its floor, and one full-momentum
    # train-mode pass pins the BN running stats to realistic values (fresh
    # (0,1) stats would leave eval-mode BN inert and He-init activations
    # would grow through the residual stack).
    for t in [params.head_w] + params.aux_w:
        t.data = t.data * 0.1
    bn_states = {id(h[0]): h[0] for _, kind, h in params._entries() if kind == "buffer"}
    for bn in bn_states.values():
        bn.momentum = 1.0
    forward(params, x, bn_mode="train")
    for bn in bn_states.values():
        bn.momentum = 0.1

    def single(v: Tensor) -> Tensor:
        return combined_loss(forward(params, v, bn_mode="eval"), labels, tcfg)

    def batch_eval(stack: np.ndarray) -> np.ndarray:
        m = stack.shape[0]
        flat = stack.reshape((m,) + stack.shape[2:])  # drop x0's batch dim
        out, aux = forward(params, Tensor(flat), bn_mode="eval")
        labs = np.broadcast_to(labels, (m,) + labels.shape[1:])
        return _loss_per_sample(out.data, [a.data for a in aux], labs, tcfg)

    err = gradcheck(single, x, batch_eval=batch_eval)
    return [("network_input", err)]


def _loss_per_sample(logits: np.ndarray, aux: list, labels: np.ndarray,
                     cfg: TrainConfig) -> np.ndarray:
    """Vector of per-sample combined losses, numpy only; must agree with
    training.combined_loss at batch size 1."""

    def head(lg, lb):
        k = lg.shape[1]
        m = lg.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(lg - m).sum(axis=1, keepdims=True))
        logp = lg - lse
        onehot = np.moveaxis(np.eye(k)[lb], -1, 1)
        ce = -(logp * onehot).sum(axis=1).mean(axis=(-2, -1))
        p = np.exp(logp)
        overlap = (p * onehot).sum(axis=(-2, -1))
        psq = (p * p).sum(axis=(-2, -1))
        gsq = onehot.sum(axis=(-2, -1))
        dice = (2 * overlap + cfg.dice_eps) / (psq + gsq + cfg.dice_eps)
        return ce + (1.0 - dice.mean(axis=-1))

    total = head(logits, labels)
    weight_sum = 1.0
    for lg, w in zip(aux, (0.5, 0.25)):
        factor = labels.shape[-1] // lg.shape[-1]
        total = total + w * head(lg, labels[..., ::factor, ::factor])
        weight_sum += w
    return total / weight_sum


TARGETS = {
    "ops": _ops_checks,
    "ddm": _ddm_checks,
    "block": _block_checks,
    "network": _network_checks,
}


def run_target(target: str, seed: int = 0) -> list:
    """Run one suite; returns [(check name, max relative error), ...]."""
    if target not in TARGETS:
        raise ValueError(f"unknown gradcheck target {target!r}")
    rng = np.random.default_rng(seed)
    return TARGETS[target](rng)
