"""Population-matching losses between unpaired generated and target sets.

All functions take ``(n, d)`` float64 tensors. The kernel bank and the
entropic transport cost are implemented as fused autograd functions with
hand-written adjoints: the Sinkhorn adjoint replays every iteration in
reverse, so the gradient is that of the unrolled solver, but without the
memory traffic of recording 200 log-sum-exp nodes per call.
"""

import math
from dataclasses import dataclass

import torch
from torch.autograd.function import once_differentiable

from .autodiff import DTYPE, stop_gradient

BANDWIDTHS = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
# exp() of arguments far below the underflow threshold takes a slow path on
# x86; e^-700 ~ 1e-304 is indistinguishable from zero at any tolerance used here.
_EXP_FLOOR = -700.0


def _exp(x):
    return torch.exp(x.clamp_min(_EXP_FLOOR))


def _logsumexp(x, dim):
    top = x.amax(dim=dim, keepdim=True)
    return (_exp(x - top).sum(dim=dim, keepdim=True).log() + top).squeeze(dim)


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.1
    n_iter: int = 100

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")


@dataclass(frozen=True)
class LossWeights:
    mmd: float = 1.0
    w2: float = 1.0
    drift: float = 1.0
    down: float = 0.1

    def __post_init__(self):
        for name in ("mmd", "w2", "drift", "down"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class LossReport:
    """Loss components of one training batch; ``total`` keeps its graph."""

    mmd: torch.Tensor
    w2: torch.Tensor
    drift: torch.Tensor
    down: torch.Tensor
    total: torch.Tensor

    def to_record(self):
        return {k: float(getattr(self, k).detach()) for k in ("mmd", "w2", "drift", "down", "total")}

    def nonfinite_components(self):
        return [k for k, v in self.to_record().items() if not math.isfinite(v)]


def _check_set(x, name):
    if x.ndim != 2:
        raise ValueError(f"{name} must be a 2-d (n, d) array, got shape {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise ValueError(f"{name} is empty")


def sq_dists(x, y):
    """Exact pairwise squared Euclidean distances (zero on coincident rows)."""
    return torch.cdist(x, y, compute_mode="donot_use_mm_for_euclid_dist").square()


def kernel_bank(x, y, bandwidths=BANDWIDTHS):
    """Sum over the bank of ``exp(-||x - y||^2 / b)``; an ``(n, m)`` matrix."""
    d2 = sq_dists(x, y)
    return sum(_exp(-d2 / b) for b in bandwidths)


_GRAD_BLOCK = 128


def _bank_block(d2, bandwidths, need_slope):
    """Kernel-bank sum and its bandwidth-weighted slope for one distance block."""
    buf, total = torch.empty_like(d2), torch.zeros_like(d2)
    slope = torch.zeros_like(d2) if need_slope else None
    for b in bandwidths:
        torch.mul(d2, -1.0 / b, out=buf)
        buf.clamp_(min=_EXP_FLOOR).exp_()
        total.add_(buf)
        if need_slope:
            slope.add_(buf, alpha=1.0 / b)
    return total, slope


class KernelBankMean(torch.autograd.Function):
    """``mean_ij sum_b exp(-||x_i - y_j||^2 / b)`` with a matmul adjoint.

    Also returns the (non-differentiable) kernel-sum matrix so callers can
    reuse it, e.g. for the drifting field. The forward pass works in row
    blocks and folds the slope matrix straight into the two contractions
    the adjoint needs, ``slope @ y - rowsum * x`` and its transpose; for
    ``x is y`` only the upper block triangle is evaluated.
    """

    @staticmethod
    def forward(ctx, x, y, bandwidths):
        need_x, need_y = ctx.needs_input_grad[:2]
        need_slope = need_x or need_y
        symmetric = x is y
        n, m = x.shape[0], y.shape[0]
        total = torch.empty(n, m, dtype=x.dtype)
        row_dot = torch.zeros_like(x) if need_slope else None
        row_sum = torch.zeros(n, 1, dtype=x.dtype) if need_slope else None
        col_dot = torch.zeros_like(y) if need_slope and not symmetric else None
        col_sum = torch.zeros(m, 1, dtype=x.dtype) if need_slope and not symmetric else None
        for lo in range(0, n, _GRAD_BLOCK):
            hi = min(lo + _GRAD_BLOCK, n)
            xb = x[lo:hi]
            c0 = lo if symmetric else 0
            tot, slope = _bank_block(sq_dists(xb, y[c0:]), bandwidths, need_slope)
            total[lo:hi, c0:] = tot
            if symmetric:
                total[hi:, lo:hi] = tot[:, hi - lo :].T
            if not need_slope:
                continue
            row_dot[lo:hi] += slope @ y[c0:]
            row_sum[lo:hi] += slope.sum(1, keepdim=True)
            if symmetric:
                off = slope[:, hi - lo :]
                row_dot[hi:] += off.T @ xb
                row_sum[hi:] += off.sum(0).unsqueeze(1)
            else:
                col_dot += slope.T @ xb
                col_sum += slope.sum(0).unsqueeze(1)
        adj_x = adj_y = None
        if need_slope:
            adj_x = row_dot - row_sum * x
            adj_y = adj_x if symmetric else col_dot - col_sum * y
        ctx.save_for_backward(adj_x, adj_y)
        ctx.numel = n * m
        ctx.mark_non_differentiable(total)
        return total.mean(), total

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_out, _grad_matrix):
        adj_x, adj_y = ctx.saved_tensors
        scale = 2.0 * grad_out / ctx.numel
        gx = scale * adj_x if ctx.needs_input_grad[0] else None
        gy = scale * adj_y if ctx.needs_input_grad[1] else None
        return gx, gy, None


_NOGRAD_BLOCK = 256


def _kernel_sum_nograd(x, y, bandwidths, block_rows):
    # Small row blocks and in-place updates keep temporaries cache-sized;
    # for x == y only the upper block triangle is visited.
    symmetric = x is y or (x.shape == y.shape and torch.equal(x, y))
    total = torch.zeros((), dtype=x.dtype)
    for lo in range(0, x.shape[0], block_rows):
        xb = x[lo : lo + block_rows]
        d2 = sq_dists(xb, y[lo:] if symmetric else y)
        buf, acc = torch.empty_like(d2), torch.zeros_like(d2)
        for b in bandwidths:
            torch.mul(d2, -1.0 / b, out=buf)
            acc.add_(buf.clamp_(min=_EXP_FLOOR).exp_())
        if symmetric:
            nb = xb.shape[0]
            total += acc[:, :nb].sum() + 2.0 * acc[:, nb:].sum()
        else:
            total += acc.sum()
    return total / (x.shape[0] * y.shape[0])


def kernel_mean(x, y, bandwidths=BANDWIDTHS, block_rows=None):
    """Mean of the kernel bank over all pairs.

    Without gradients the sum is accumulated block by block (``block_rows``
    rows at a time, default 256); with gradients the fused autograd path is
    used, row-blocked only when ``block_rows`` is given.
    """
    bandwidths = tuple(bandwidths)
    if not (torch.is_grad_enabled() and (x.requires_grad or y.requires_grad)):
        return _kernel_sum_nograd(x, y, bandwidths, block_rows or _NOGRAD_BLOCK)
    if block_rows is None or x.shape[0] <= block_rows:
        return KernelBankMean.apply(x, y, bandwidths)[0]
    total = sum(
        KernelBankMean.apply(x[i : i + block_rows], y, bandwidths)[0] * x[i : i + block_rows].shape[0]
        for i in range(0, x.shape[0], block_rows)
    )
    return total / x.shape[0]


def mmd(x, y, bandwidths=BANDWIDTHS, block_rows=None):
    """Biased (V-statistic) squared MMD summed over the RBF bandwidth bank.

    Identical inputs give exactly zero because the three kernel means are
    evaluated by the same code on the same data.
    """
    _check_set(x, "x")
    _check_set(y, "y")
    kxx = kernel_mean(x, x, bandwidths, block_rows)
    kyy = kernel_mean(y, y, bandwidths, block_rows)
    kxy = kernel_mean(x, y, bandwidths, block_rows)
    return kxx + kyy - 2.0 * kxy


# A reference kernel is rebuilt once the potentials move this far from it.
_REFRESH_GAP = 200.0
_TINY_SUM = 1e-280


class _HalfSweeps:
    """One direction of log-domain Sinkhorn updates, evaluated by mat-vecs.

    ``LSE_j(M_ij + g_j)`` is computed as ``top_i + shift + log(E @ w)_i`` with
    ``E = exp(M + g_ref - top)`` fixed until ``g`` drifts more than
    ``_REFRESH_GAP`` from ``g_ref`` (or a sum threatens to underflow). This
    is the log-domain iteration to roundoff, at one mat-vec per step.
    """

    def __init__(self, neg_cost):
        self.neg = neg_cost
        self.kernels = []  # reference kernels, one per epoch
        self.steps = []  # (epoch, w, s) per update

    def _refresh(self, g):
        shifted = self.neg + g[None, :]
        top = shifted.amax(1)
        self.kernels.append((_exp(shifted - top[:, None]), g.clone(), top))

    def lse(self, g):
        if not self.kernels or (g - self.kernels[-1][1]).abs().max() > _REFRESH_GAP:
            self._refresh(g)
        kernel, ref, top = self.kernels[-1]
        delta = g - ref
        shift = delta.max()
        w = _exp(delta - shift)
        s = kernel @ w
        if s.min() < _TINY_SUM:
            self._refresh(g)
            return self.lse(g)
        self.steps.append((len(self.kernels) - 1, w, s))
        return top + shift + torch.log(s)


def _sinkhorn_solve(neg_cost, n_iter):
    n, m = neg_cost.shape
    log_a, log_b = -math.log(n), -math.log(m)
    rows = _HalfSweeps(neg_cost)
    cols = _HalfSweeps(neg_cost.T)
    g = torch.zeros(m, dtype=neg_cost.dtype)
    for _ in range(n_iter):
        f = log_a - rows.lse(g)
        g = log_b - cols.lse(f)
    return f, g, rows, cols


def sinkhorn_plan(x, y, cfg=SinkhornConfig()):
    """Entropic transport plan (no gradient) between two uniform point clouds."""
    _check_set(x, "x")
    _check_set(y, "y")
    with torch.no_grad():
        neg = -sq_dists(x, y) / cfg.epsilon
        f, g, _, _ = _sinkhorn_solve(neg, cfg.n_iter)
        return _exp(neg + f[:, None] + g[None, :])


def _sweep_adjoint(sweeps, k, grad_out, acc):
    """Pull ``grad_out`` (adjoint of the k-th LSE result's negation) back one half-step.

    Returns the adjoint of that step's input potential and records the
    rank-one contribution to the cost-matrix adjoint in ``acc``.
    """
    epoch, w, s = sweeps.steps[k]
    kernel = sweeps.kernels[epoch][0]
    r = grad_out / s
    acc.setdefault(epoch, []).append((r, w))
    return -w * (kernel.T @ r)


def _accumulated(sweeps, acc):
    total = 0.0
    for epoch, pairs in acc.items():
        a = torch.stack([p[0] for p in pairs], dim=1)
        b = torch.stack([p[1] for p in pairs], dim=1)
        total = total + sweeps.kernels[epoch][0] * (a @ b.T)
    return total


class SinkhornCost(torch.autograd.Function):
    """Transport cost ``<P, C>`` of the unrolled log-domain Sinkhorn plan.

    The adjoint walks the iterations backwards: each row (column) update is
    a softmax over the reference kernel, so its pullback is a mat-vec plus
    a rank-one term folded into the cost-matrix adjoint.
    """

    @staticmethod
    def forward(ctx, x, y, epsilon, n_iter):
        cost = sq_dists(x, y)
        if not torch.isfinite(cost).all():
            raise ValueError("non-finite entries in the Sinkhorn cost matrix")
        neg = -cost / epsilon
        f, g, rows, cols = _sinkhorn_solve(neg, n_iter)
        plan = _exp(neg + f[:, None] + g[None, :])
        ctx.save_for_backward(x, y, neg, plan)
        ctx.sweeps = (rows, cols)
        ctx.consts = (epsilon, n_iter)
        return (plan * cost).sum()

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_out):
        x, y, neg, plan = ctx.saved_tensors
        rows, cols = ctx.sweeps
        epsilon, n_iter = ctx.consts
        # value = -eps * sum(P * M) with P = exp(M + f + g)
        pm = plan * neg
        grad_m = -epsilon * (plan + pm)
        grad_f = -epsilon * pm.sum(1)
        grad_g = -epsilon * pm.sum(0)
        acc_rows, acc_cols = {}, {}
        for k in range(n_iter - 1, -1, -1):
            # g_k = log_b - LSE_i(M_ij + f_k,i)
            grad_f = grad_f + _sweep_adjoint(cols, k, grad_g, acc_cols)
            # f_k = log_a - LSE_j(M_ij + g_{k-1},j)
            grad_g = _sweep_adjoint(rows, k, grad_f, acc_rows)
            grad_f = torch.zeros_like(grad_f)
        grad_m = grad_m - _accumulated(rows, acc_rows) - _accumulated(cols, acc_cols).T
        grad_c = -grad_m / epsilon * grad_out
        ctx.sweeps = None
        gx = gy = None
        if ctx.needs_input_grad[0]:
            gx = 2.0 * (grad_c.sum(1, keepdim=True) * x - grad_c @ y)
        if ctx.needs_input_grad[1]:
            gy = 2.0 * (grad_c.sum(0, keepdim=True).T * y - grad_c.T @ x)
        return gx, gy, None, None


def sinkhorn_cost(x, y, cfg=SinkhornConfig()):
    """Entropic-plan transport cost ``<P, C>`` under squared Euclidean cost."""
    _check_set(x, "x")
    _check_set(y, "y")
    return SinkhornCost.apply(x, y, cfg.epsilon, cfg.n_iter)


def sinkhorn_w2(x, y, cfg=SinkhornConfig()):
    """Square root of :func:`sinkhorn_cost`; the reported W2 distance."""
    return torch.sqrt(sinkhorn_cost(x, y, cfg))


def _log_kernel_bank(d2, bandwidths):
    return _logsumexp(torch.stack([-d2 / b for b in bandwidths]), dim=0)


# Row sums below this are recomputed in log space before normalising.
_TINY_ROW_SUM = 1e-250


def _mean_shift(points, anchors, weights, bandwidths):
    """``sum_j w_ij (anchor_j - point_i) / sum_j w_ij`` for a kernel-sum matrix ``w``."""
    row_sum = weights.sum(1, keepdim=True)
    small = (row_sum < _TINY_ROW_SUM).squeeze(1)
    if small.any():
        logw = _log_kernel_bank(sq_dists(points[small], anchors), bandwidths)
        weights = weights.clone()
        row_sum = row_sum.clone()
        weights[small] = _exp(logw - logw.amax(1, keepdim=True))
        row_sum[small] = weights[small].sum(1, keepdim=True)
    return (weights @ anchors) / row_sum - points


def _field_from_kernels(generated, target, k_gen_target, k_gen_gen, bandwidths):
    attraction = _mean_shift(generated, target, k_gen_target, bandwidths)
    repulsion = _mean_shift(generated, generated, k_gen_gen, bandwidths)
    return attraction - repulsion


def drifting_field(generated, target, bandwidths=BANDWIDTHS):
    """Kernel attraction towards the target minus repulsion within the generated set.

    Both terms are kernel-weighted mean shifts over the same bandwidth bank
    as the MMD, so the field vanishes when the two sets coincide as
    multisets; the generated set's self-pairs keep the repulsion
    normaliser positive. Returned without a graph: it only ever serves as
    a frozen target.
    """
    _check_set(generated, "generated")
    _check_set(target, "target")
    with torch.no_grad():
        gen, tgt = generated.detach(), target.detach()
        return _field_from_kernels(
            gen, tgt, kernel_bank(gen, tgt, bandwidths), kernel_bank(gen, gen, bandwidths), bandwidths
        )


def _drift_loss_from_field(generated, field):
    goal = stop_gradient(generated + field)
    return (generated - goal).square().sum(1).mean()


def drift_loss(generated, target, bandwidths=BANDWIDTHS):
    return _drift_loss_from_field(generated, drifting_field(generated, target, bandwidths))


def downhill_loss(model, sources, delta, action=None, z_det=None, u_source=None):
    """Hinge on the potential increasing along the noise-free prediction.

    ``model`` needs ``potential(z, delta, action)`` and
    ``deterministic(z, delta, action)``; precomputed ``z_det`` /
    ``u_source`` are reused when the caller already has them.
    """
    if z_det is None:
        z_det = model.deterministic(sources, delta, action)
    if u_source is None:
        u_source = model.potential(sources, delta, action)
    u_next = model.potential(z_det, delta, action)
    return torch.relu(u_next - u_source).mean()


def composite_loss(
    model,
    sources,
    targets,
    delta,
    noise,
    weights=LossWeights(),
    action=None,
    sinkhorn=SinkhornConfig(),
    drift_on=True,
    down_on=True,
):
    """Weighted sum of MMD, entropic transport cost, drift and downhill terms.

    ``noise`` has shape ``(n_sources, K, d)``; the K samples per source are
    flattened into one generated population.
    """
    samples, parts = model.one_step(sources, delta, noise, action)
    generated = samples.reshape(-1, samples.shape[-1])
    zero = torch.zeros((), dtype=DTYPE)
    drift_on = drift_on and weights.drift > 0
    down_on = down_on and weights.down > 0 and parts.potential is not None

    l_mmd = l_drift = l_down = zero
    if weights.mmd > 0 or drift_on:
        _check_set(targets, "targets")
        bank = tuple(BANDWIDTHS)
        k_gg, mat_gg = KernelBankMean.apply(generated, generated, bank)
        k_gt, mat_gt = KernelBankMean.apply(generated, targets, bank)
        if weights.mmd > 0:
            k_tt, _ = KernelBankMean.apply(targets, targets, bank)
            l_mmd = k_gg + k_tt - 2.0 * k_gt
        if drift_on:
            with torch.no_grad():
                field = _field_from_kernels(generated.detach(), targets, mat_gt, mat_gg, bank)
            l_drift = _drift_loss_from_field(generated, field)
    l_w2 = sinkhorn_cost(generated, targets, sinkhorn) if weights.w2 > 0 else zero
    if down_on:
        l_down = downhill_loss(
            model, sources, delta, action, z_det=parts.z_det, u_source=parts.potential
        )
    total = weights.mmd * l_mmd + weights.w2 * l_w2 + weights.drift * l_drift + weights.down * l_down
    return LossReport(mmd=l_mmd, w2=l_w2, drift=l_drift, down=l_down, total=total)
