"""End-to-end optimization of the pyramidal scene.

One training step renders a full image in weighted mode, evaluates the
photometric loss, backpropagates through the rasterizer, the weighting and
color-correction networks, and the embeddings, then applies per-group Adam
updates.  Periodic maintenance: split/clone/prune density control, opacity
resets, scale-ordered level reassignment, and the SH degree schedule.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import geom, metrics, nets, scene, splat
from .errors import NumericalError
from .geom import Camera
from .nets import Embeddings
from .scene import ForwardCaches, GaussianPyramid, SceneModel
from .splat import WeightingMode

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lam: float = 0.8                      # loss balance: lam*MSE + (1-lam)*(1-SSIM)
    iterations: int = 30_000
    lr_position: float = 1.6e-5           # scaled by scene extent, decays 100x
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 2.5e-3 / 20.0
    lr_networks: float = 3e-4
    lr_embeddings: float = 0.1
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15_000
    densify_grad_threshold: float = 2e-4
    clone_scale_frac: float = 0.01        # below: clone, above: split
    split_shrink: float = 1.6
    prune_opacity: float = 0.005
    prune_scale_frac: float = 0.1
    opacity_reset_interval: int = 3000
    level_reassign_interval: int = 1000
    sh_degree_interval: int = 1000
    weighting: str = "weighted"           # weighted | uniform | random | top1 | plain
    color_correction: bool = True
    structural_term: str = "one_minus"    # "one_minus" (1-SSIM) or "raw" (SSIM)
    background: tuple = (0.0, 0.0, 0.0)
    log_interval: int = 100
    seed: int = 0
    deterministic: bool = True


def position_lr(config: TrainConfig, extent: float, step: int) -> float:
    """3DGS-style exponential decay from init to init/100 over the run."""
    frac = min(max(step, 0) / max(config.iterations, 1), 1.0)
    return config.lr_position * extent * (0.01**frac)


@dataclass
class DensifyReport:
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0
    # child bookkeeping for the inheritance invariant
    child_rows: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.int64))
    parent_level: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.uint8))
    parent_cluster: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.int32))


@dataclass
class TrainState:
    model: SceneModel
    config: TrainConfig
    rng: np.random.Generator
    # Adam first/second moments per parameter group, index-aligned with
    # gaussians for the per-Gaussian groups
    m1: dict = dc_field(default_factory=dict)
    m2: dict = dc_field(default_factory=dict)
    adam_t: dict = dc_field(default_factory=dict)
    # densification statistics
    acc_grad2d: np.ndarray | None = None
    acc_count: np.ndarray | None = None
    acc_grad3d: np.ndarray | None = None
    appearance_rows: dict = dc_field(default_factory=dict)  # camera index -> row
    iteration: int = 0

    def gaussian_group(self, name: str) -> np.ndarray:
        g = self.model.gaussians
        return {
            "positions": g.positions,
            "quaternions": g.quaternions,
            "log_scales": g.log_scales,
            "opacity_logits": g.opacity_logits,
            "sh": g.sh,
        }[name]


GAUSSIAN_GROUPS = ("positions", "quaternions", "log_scales", "opacity_logits", "sh")


def _net_param_names(state: TrainState) -> list[tuple[str, np.ndarray]]:
    items = []
    for i, p in enumerate(state.model.weight_net.parameters()):
        items.append((f"wnet_{i}", p))
    for i, p in enumerate(state.model.correction_net.parameters()):
        items.append((f"cnet_{i}", p))
    items.append(("cluster_embed", state.model.embeddings.cluster))
    items.append(("appearance_embed", state.model.embeddings.appearance))
    return items


def init_train_state(
    model: SceneModel,
    config: TrainConfig,
    n_appearance: int,
    appearance_rows: dict | None = None,
) -> TrainState:
    """Set up optimizer state; casts all learnable parameters to float32."""
    rng = np.random.default_rng(config.seed)
    g = model.gaussians
    g.positions = g.positions.astype(np.float32)
    g.quaternions = g.quaternions.astype(np.float32)
    g.log_scales = g.log_scales.astype(np.float32)
    g.opacity_logits = g.opacity_logits.astype(np.float32)
    g.sh = g.sh.astype(np.float32)
    if model.embeddings.appearance.shape[0] != n_appearance:
        model.embeddings = Embeddings.create(
            model.n_clusters, n_appearance,
            dim=model.embeddings.cluster.shape[1],
            rng=np.random.default_rng(config.seed + 1),
        )
    model.embeddings.cluster = model.embeddings.cluster.astype(np.float32)
    model.embeddings.appearance = model.embeddings.appearance.astype(np.float32)
    for net in (model.weight_net, model.correction_net):
        net.weights = [w.astype(np.float32) for w in net.weights]
        net.biases = [b.astype(np.float32) for b in net.biases]
    model.centroids = model.centroids.astype(np.float32)
    model.weighting_mode = WeightingMode(config.weighting)
    model.color_correction = config.color_correction
    model.background = np.asarray(config.background, dtype=np.float64)
    model.active_sh_degree = 0

    state = TrainState(model=model, config=config, rng=rng,
                       appearance_rows=appearance_rows or {})
    for name in GAUSSIAN_GROUPS:
        p = state.gaussian_group(name)
        state.m1[name] = np.zeros(p.shape)
        state.m2[name] = np.zeros(p.shape)
        state.adam_t[name] = 0
    for name, p in _net_param_names(state):
        state.m1[name] = np.zeros(p.shape)
        state.m2[name] = np.zeros(p.shape)
        state.adam_t[name] = 0
    _reset_stats(state)
    return state


def _reset_stats(state: TrainState) -> None:
    n = state.model.gaussians.n
    state.acc_grad2d = np.zeros(n)
    state.acc_count = np.zeros(n)
    state.acc_grad3d = np.zeros((n, 3))


# ---------------------------------------------------------------------------
# metrics re-exported at the op surface used by the loop
# ---------------------------------------------------------------------------

compute_ssim = metrics.compute_ssim
compute_psnr = metrics.compute_psnr


def loss(target: np.ndarray, rendered: np.ndarray, lam: float = 0.8,
         structural_term: str = "one_minus") -> float:
    """Photometric loss; `structural_term="raw"` keeps the literal +SSIM form."""
    if structural_term == "raw":
        value = lam * float(np.mean((target - rendered) ** 2))
        if lam < 1.0:
            value += (1.0 - lam) * metrics.compute_ssim(target, rendered)
        return value
    return metrics.loss(target, rendered, lam)


# ---------------------------------------------------------------------------
# full backward chain
# ---------------------------------------------------------------------------

@dataclass
class StepGrads:
    """Gradients for every trainable parameter class."""

    positions: np.ndarray
    quaternions: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    cluster_embed: np.ndarray
    appearance_embed: np.ndarray
    weight_net: list
    correction_net: list
    # raw screen-space gradients for densification stats
    mean2d: np.ndarray
    valid: np.ndarray


def loss_and_grads(
    model: SceneModel,
    cam: Camera,
    target: np.ndarray,
    appearance_index: int | None = None,
    lam: float = 0.8,
    mode: WeightingMode | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, splat.RenderOutput, StepGrads]:
    """Render, compute the loss, and backpropagate to every parameter class."""
    out, caches = scene.render_view(
        model, cam, mode=mode, appearance_index=appearance_index,
        rng=rng, want_cache=True,
    )
    loss_val, d_img = metrics.loss_backward(target, out.image, lam)
    rg = splat.render_backward(caches.job, out, d_img)

    g = model.gaussians
    quats = g.quaternions.astype(np.float64)
    log_scales = g.log_scales.astype(np.float64)
    alpha = caches.job.alpha
    d_logits = rg.alpha * alpha * (1.0 - alpha)

    k = model.n_clusters
    d_cluster_embed = np.zeros((k, model.embeddings.cluster.shape[1]))
    d_appearance = np.zeros(model.embeddings.appearance.shape)
    cnet_grads = [np.zeros_like(np.asarray(p, dtype=np.float64))
                  for p in model.correction_net.parameters()]
    if caches.corr_cache is not None:
        d_offsets = np.zeros((k, 3))
        np.add.at(d_offsets, g.clusters.astype(np.int64), rg.color)
        d_ec, d_row, cnet_grads = nets.color_correction_backward(
            model.correction_net, caches.corr_cache, d_offsets
        )
        d_cluster_embed += d_ec
        if appearance_index is not None and 0 <= appearance_index < d_appearance.shape[0]:
            d_appearance[appearance_index] = d_row
        elif d_appearance.shape[0] > 0:  # mean-embedding path
            d_appearance += d_row / d_appearance.shape[0]

    d_sh_colors = rg.color * caches.clamp_mask
    d_sh, d_dirs = geom.eval_sh_backward(
        g.sh.astype(np.float64), caches.dirs, d_sh_colors, model.active_sh_degree
    )
    d_pos_sh = geom.normalize_dirs_backward(caches.dirs_raw, d_dirs)

    wnet_grads = [np.zeros_like(np.asarray(p, dtype=np.float64))
                  for p in model.weight_net.parameters()]
    if caches.weight_cache is not None and rg.weight_table is not None:
        d_ec2, wnet_grads = nets.weighting_backward(
            model.weight_net, caches.weight_cache, rg.weight_table
        )
        d_cluster_embed += d_ec2

    d_pos_proj, d_quat, d_ls = geom.project_backward(
        caches.proj, quats, log_scales, rg.mean2d, rg.cov2d
    )

    grads = StepGrads(
        positions=d_pos_proj + d_pos_sh,
        quaternions=d_quat,
        log_scales=d_ls,
        opacity_logits=d_logits,
        sh=d_sh,
        cluster_embed=d_cluster_embed,
        appearance_embed=d_appearance,
        weight_net=wnet_grads,
        correction_net=cnet_grads,
        mean2d=rg.mean2d,
        valid=caches.proj.valid,
    )
    return loss_val, out, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _adam_step(state: TrainState, name: str, param: np.ndarray,
               grad: np.ndarray, lr) -> None:
    m1, m2 = state.m1[name], state.m2[name]
    m1 *= ADAM_B1
    m1 += (1.0 - ADAM_B1) * grad
    m2 *= ADAM_B2
    m2 += (1.0 - ADAM_B2) * grad * grad
    state.adam_t[name] += 1
    t = state.adam_t[name]
    mhat = m1 / (1.0 - ADAM_B1**t)
    vhat = m2 / (1.0 - ADAM_B2**t)
    param -= np.asarray(lr * mhat / (np.sqrt(vhat) + ADAM_EPS), dtype=param.dtype)


def apply_gradients(state: TrainState, grads: StepGrads) -> None:
    cfg = state.config
    model = state.model
    sh_lr = np.full((1, 16, 1), cfg.lr_sh_rest)
    sh_lr[0, 0, 0] = cfg.lr_sh_dc
    _adam_step(
        state, "positions", model.gaussians.positions, grads.positions,
        position_lr(cfg, model.scene_extent, state.iteration),
    )
    _adam_step(state, "quaternions", model.gaussians.quaternions,
               grads.quaternions, cfg.lr_rotation)
    _adam_step(state, "log_scales", model.gaussians.log_scales,
               grads.log_scales, cfg.lr_scale)
    _adam_step(state, "opacity_logits", model.gaussians.opacity_logits,
               grads.opacity_logits, cfg.lr_opacity)
    _adam_step(state, "sh", model.gaussians.sh, grads.sh, sh_lr)

    net_grads = dict(
        (f"wnet_{i}", gr) for i, gr in enumerate(grads.weight_net)
    )
    net_grads.update((f"cnet_{i}", gr) for i, gr in enumerate(grads.correction_net))
    net_grads["cluster_embed"] = grads.cluster_embed
    net_grads["appearance_embed"] = grads.appearance_embed
    for name, p in _net_param_names(state):
        lr = cfg.lr_embeddings if name.endswith("embed") else cfg.lr_networks
        _adam_step(state, name, p, net_grads[name], lr)

    # renormalize quaternions that actually moved
    q = model.gaussians.quaternions
    norm2 = np.sum(q.astype(np.float64) ** 2, axis=1)
    off = np.abs(norm2 - 1.0) > 1e-9
    if off.any():
        q[off] = (q[off].astype(np.float64)
                  / np.sqrt(norm2[off])[:, None]).astype(q.dtype)


def train_step(state: TrainState, image: np.ndarray, cam: Camera) -> float:
    """One optimization step on one training image; returns the loss."""
    model = state.model
    row = state.appearance_rows.get(cam.index, cam.index)
    loss_val, out, grads = loss_and_grads(
        model, cam, image,
        appearance_index=row,
        lam=state.config.lam,
        rng=state.rng,
    )
    if not np.isfinite(loss_val):
        raise NumericalError(
            f"non-finite loss at iteration {state.iteration} (camera {cam.index})"
        )
    apply_gradients(state, grads)
    # densification statistics in half-image units (3DGS convention)
    gx = grads.mean2d[:, 0] * (cam.width * 0.5)
    gy = grads.mean2d[:, 1] * (cam.height * 0.5)
    gnorm = np.sqrt(gx * gx + gy * gy)
    vis = grads.valid
    state.acc_grad2d[vis] += gnorm[vis]
    state.acc_count[vis] += 1.0
    state.acc_grad3d += grads.positions
    state.iteration += 1
    model.iteration = state.iteration
    return loss_val


# ---------------------------------------------------------------------------
# density control
# ---------------------------------------------------------------------------

def densify(state: TrainState) -> DensifyReport:
    """Split/clone high-gradient Gaussians and prune transparent/huge ones.

    Children inherit the parent's level and cluster; optimizer moments stay
    index-aligned (zeros for new rows); gradient stats are reset.
    """
    cfg = state.config
    model = state.model
    g = model.gaussians
    n = g.n
    mean_grad = state.acc_grad2d / np.maximum(state.acc_count, 1.0)
    over = (mean_grad > cfg.densify_grad_threshold) & (state.acc_count > 0)
    s_max = np.exp(g.log_scales.astype(np.float64)).max(axis=1)
    big = s_max > cfg.clone_scale_frac * model.scene_extent
    clone_mask = over & ~big
    split_mask = over & big

    report = DensifyReport()
    pieces = [g.select(~split_mask)]
    moment_keep = ~split_mask
    child_parents = []

    if clone_mask.any():
        clones = g.select(clone_mask)
        g3 = state.acc_grad3d[clone_mask]
        norms = np.linalg.norm(g3, axis=1, keepdims=True)
        direction = np.where(norms > 0, -g3 / np.maximum(norms, 1e-12), 0.0)
        nudge = 0.1 * np.exp(
            clones.log_scales.astype(np.float64).mean(axis=1, keepdims=True)
        )
        clones.positions = (
            clones.positions.astype(np.float64) + direction * nudge
        ).astype(g.positions.dtype)
        pieces.append(clones)
        child_parents.append(np.flatnonzero(clone_mask))
        report.n_cloned = int(clone_mask.sum())

    if split_mask.any():
        parents = np.flatnonzero(split_mask)
        for _ in range(2):
            kids = g.select(split_mask)
            R = geom.quat_to_rotmat(kids.quaternions.astype(np.float64))
            eps = state.rng.standard_normal((kids.n, 3))
            local = eps * np.exp(kids.log_scales.astype(np.float64))
            kids.positions = (
                kids.positions.astype(np.float64)
                + np.einsum("nij,nj->ni", R, local)
            ).astype(g.positions.dtype)
            kids.log_scales = (
                kids.log_scales.astype(np.float64) - np.log(cfg.split_shrink)
            ).astype(g.log_scales.dtype)
            pieces.append(kids)
            child_parents.append(parents)
        report.n_split = int(split_mask.sum())

    new_g = GaussianPyramid.concatenate(pieces)
    for name in GAUSSIAN_GROUPS:
        kept1 = state.m1[name][moment_keep]
        kept2 = state.m2[name][moment_keep]
        extra = new_g.n - kept1.shape[0]
        pad = np.zeros((extra,) + kept1.shape[1:])
        state.m1[name] = np.concatenate([kept1, pad])
        state.m2[name] = np.concatenate([kept2, pad])

    n_kept = int(moment_keep.sum())
    if child_parents:
        child_rows = np.arange(n_kept, new_g.n)
        parent_idx = np.concatenate(child_parents)
        report.child_rows = child_rows
        report.parent_level = g.levels[parent_idx].copy()
        report.parent_cluster = g.clusters[parent_idx].copy()

    # prune: nearly transparent or oversized
    alpha = 1.0 / (1.0 + np.exp(-new_g.opacity_logits.astype(np.float64)))
    s_max_new = np.exp(new_g.log_scales.astype(np.float64)).max(axis=1)
    keep = (alpha >= cfg.prune_opacity) & (
        s_max_new <= cfg.prune_scale_frac * model.scene_extent
    )
    report.n_pruned = int((~keep).sum())
    if report.n_pruned:
        remap = -np.ones(new_g.n, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        new_g = new_g.select(keep)
        for name in GAUSSIAN_GROUPS:
            state.m1[name] = state.m1[name][keep]
            state.m2[name] = state.m2[name][keep]
        if report.child_rows.size:
            mapped = remap[report.child_rows]
            alive = mapped >= 0
            report.child_rows = mapped[alive]
            report.parent_level = report.parent_level[alive]
            report.parent_cluster = report.parent_cluster[alive]

    model.gaussians = new_g
    _reset_stats(state)
    return report


def reset_opacity(state: TrainState) -> None:
    """Clamp opacities down to 0.01 (3DGS periodic reset)."""
    cap = float(np.log(0.01 / 0.99))
    logits = state.model.gaussians.opacity_logits
    np.minimum(logits, np.asarray(cap, dtype=logits.dtype), out=logits)


def level_targets(n: int, n_levels: int) -> np.ndarray:
    """Largest-remainder allocation of n into 1:2:...:L proportions."""
    weights = np.arange(1, n_levels + 1, dtype=np.float64)
    ideal = n * weights / weights.sum()
    base = np.floor(ideal).astype(np.int64)
    rem = ideal - base
    deficit = n - int(base.sum())
    order = np.argsort(-rem, kind="stable")
    base[order[:deficit]] += 1
    return base


def reassign_levels(state: TrainState) -> None:
    """Re-partition levels by descending max-axis scale, 1:2:...:L populations.

    Only the level tags change; clusters, parameters, and optimizer moments
    keep their positions.
    """
    model = state.model
    g = model.gaussians
    s_max = np.exp(g.log_scales.astype(np.float64)).max(axis=1)
    order = np.argsort(-s_max, kind="stable")
    counts = level_targets(g.n, model.n_levels)
    new_levels = np.empty(g.n, dtype=np.uint8)
    start = 0
    for lvl, c in enumerate(counts, start=1):
        new_levels[order[start : start + c]] = lvl
        start += c
    g.levels = new_levels


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def evaluate(
    model: SceneModel,
    dataset,
    indices: list[int],
    appearance_rows: dict | None = None,
) -> list[tuple[int, float, float]]:
    """Per-image (index, PSNR, SSIM) over the given dataset views."""
    rows = appearance_rows or {}
    results = []
    for i in indices:
        cam = dataset.cameras[i]
        out, _ = scene.render_view(
            model, cam, appearance_index=rows.get(cam.index)
        )
        results.append((
            i,
            metrics.compute_psnr(dataset.images[i], out.image),
            metrics.compute_ssim(dataset.images[i], out.image),
        ))
    return results


def run_training(
    state: TrainState,
    dataset,
    train_indices: list[int],
    probe_index: int | None = None,
    iterations: int | None = None,
    log=None,
    checkpoint_fn=None,
) -> None:
    """Drive train_step over shuffled epochs with the maintenance schedule."""
    cfg = state.config
    total = cfg.iterations if iterations is None else iterations
    model = state.model
    epoch: list[int] = []
    log = log or (lambda line: print(line, file=sys.stderr))
    t0 = time.time()
    while state.iteration < total:
        if not epoch:
            epoch = list(state.rng.permutation(train_indices))
        idx = int(epoch.pop())
        loss_val = train_step(state, dataset.images[idx], dataset.cameras[idx])
        it = state.iteration

        if it % cfg.log_interval == 0 or it == total:
            probe = ""
            if probe_index is not None:
                out, _ = scene.render_view(model, dataset.cameras[probe_index])
                probe = f"{metrics.compute_psnr(dataset.images[probe_index], out.image):.3f}"
            counts = ",".join(
                str(c) for c in model.gaussians.level_counts(model.n_levels)
            )
            log(
                f"{it}\t{loss_val:.6f}\t{probe}\t{model.gaussians.n}\t{counts}"
                f"\t{time.time() - t0:.1f}s"
            )

        # density control stops halfway through short runs (3DGS keeps 15k)
        densify_stop = min(cfg.densify_stop, total // 2)
        if it % cfg.sh_degree_interval == 0:
            model.active_sh_degree = min(scene.SH_DEGREE, it // cfg.sh_degree_interval)
        if cfg.densify_start <= it <= densify_stop and it % cfg.densify_interval == 0:
            densify(state)
        if it % cfg.opacity_reset_interval == 0 and it <= densify_stop:
            reset_opacity(state)
        if it % cfg.level_reassign_interval == 0:
            reassign_levels(state)

        if checkpoint_fn is not None and it % 5000 == 0:
            checkpoint_fn(state)


def moments_to_arrays(state: TrainState) -> dict[str, np.ndarray]:
    """Flatten optimizer state into named arrays for checkpointing."""
    out: dict[str, np.ndarray] = {}
    for name in state.m1:
        out[f"m1.{name}"] = state.m1[name]
        out[f"m2.{name}"] = state.m2[name]
        out[f"t.{name}"] = np.array([state.adam_t[name]], dtype=np.float64)
    return out


def arrays_to_moments(state: TrainState, arrays: dict[str, np.ndarray]) -> None:
    for name in list(state.m1):
        if f"m1.{name}" in arrays:
            state.m1[name] = arrays[f"m1.{name}"]
            state.m2[name] = arrays[f"m2.{name}"]
            state.adam_t[name] = int(arrays[f"t.{name}"][0])
