"""Loss evaluation, Adam updates, and the full optimization schedule.

The total objective is  lambda_I * L_image + lambda_G * L_jerk, where the
image term sums per-view contributions (multi-scale MSE against alpha-scaled
silhouette masks, plus externally supplied pixel gradients when a guidance
bridge is configured) and the geometric term is the jerk energy of the wire.
Views with a depth buffer attenuate stroke widths through the soft visibility
sigmoid before rasterization; gradients flow back through the attenuation
into the curve's depth.

Topology events run between optimizer steps: width-guided reinitialization
at the configured iterations (Adam moments of recycled controls are zeroed)
and one gradient-driven knot refinement (Adam moments around each insertion
are zeroed, new controls start cold).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .depth import VisibilityParams, sample_depth, soft_visibility
from .guidance import GuidanceClient
from .initialize import InitVolume
from .projection import Camera, StrokeBatch2D, StrokeBatchGrad, backprop_projection, load_camera, project_wire
from .raster import RasterSettings, load_mask_png, rasterize, rasterize_backward
from .spline import DEGREE, Wire4D, find_spans, jerk_energy
from .topology import (
    GradientHistory,
    default_width_epsilon,
    detect_prune_set,
    gradient_knot_refine,
    width_guided_reinit,
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewSpec:
    """File-level description of one supervision view."""

    camera: str
    mask: str | None = None
    depth: str | None = None
    guidance_id: str | None = None

    def __post_init__(self):
        if self.mask is None and self.guidance_id is None:
            raise ValueError("a view needs a mask, a guidance_id, or both")


@dataclass(frozen=True)
class ViewTarget:
    """Loaded supervision view."""

    camera: Camera
    mask: np.ndarray | None = None
    depth: np.ndarray | None = None
    guidance_id: str | None = None

    def __post_init__(self):
        if self.mask is None and self.guidance_id is None:
            raise ValueError("a view needs a mask, a guidance_id, or both")
        if self.mask is not None and self.mask.shape != (self.camera.height, self.camera.width):
            raise ValueError("mask dimensions do not match the camera")
        if self.depth is not None and self.depth.shape != (self.camera.height, self.camera.width):
            raise ValueError("depth dimensions do not match the camera")


@dataclass(frozen=True)
class RunConfig:
    """All optimizer, schedule, and loss hyperparameters.

    Defaults follow the experimental schedule (900 iterations, reinit at 150
    and 300, refinement at 600, 100-220 control points); loss weights and
    learning rates are this implementation's defaults.
    """

    control_count: int = 150
    iterations: int = 900
    reinit_iters: tuple[int, ...] = (150, 300)
    refine_iter: int | None = 600
    refine_insert_count: int = 10
    gradient_window: int = 50
    lambda_i: float = 1.0
    lambda_g: float = 0.5
    lambda_mmse: float = 1.0
    lambda_clip: float = 0.0
    alpha: float = 1.0
    mmse_levels: int = 4
    lr_position: float = 0.02
    lr_width: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    width_clamp: tuple[float, float] = (0.0, 0.05)
    initial_width: float = 0.01
    width_epsilon: float | None = None
    epsilon_px: float = 0.5
    aa_radius: float = 1.0
    flatten_tolerance: float = 0.25
    composite_mode: str = "max"
    visibility_k: float = 100.0
    visibility_b: float = 0.05
    seed: int = 0
    init_kind: str = "sphere"
    init_radius: float = 0.5
    init_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    init_depth_range: tuple[float, float] | None = None
    init_polyline: str | None = None
    bridge_address: str | None = None
    bridge_timeout: float = 120.0
    on_bridge_error: str = "abort"
    views: tuple[ViewSpec, ...] = ()

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must be in (0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for it in self.reinit_iters:
            if self.iterations and not (0 < it <= self.iterations):
                raise ValueError("reinit iterations must lie within the run")
        if self.refine_iter is not None and self.iterations \
                and not (0 < self.refine_iter <= self.iterations):
            raise ValueError("refine iteration must lie within the run")
        if self.on_bridge_error not in ("abort", "skip"):
            raise ValueError("on_bridge_error must be 'abort' or 'skip'")

    @property
    def effective_width_epsilon(self) -> float:
        if self.width_epsilon is not None:
            return self.width_epsilon
        return default_width_epsilon(self.width_clamp)

    def raster_settings(self) -> RasterSettings:
        return RasterSettings(aa_radius=self.aa_radius,
                              flatten_tolerance=self.flatten_tolerance,
                              composite_mode=self.composite_mode)

    def visibility_params(self) -> VisibilityParams:
        return VisibilityParams(k=self.visibility_k, b=self.visibility_b)


_TUPLE_FIELDS = {"reinit_iters", "adam_betas", "width_clamp", "init_center",
                 "init_depth_range"}


def load_config(path) -> RunConfig:
    """Read a TOML run config; relative file references stay relative to it."""
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    views = tuple(ViewSpec(**v) for v in doc.pop("views", []))
    kwargs = {}
    for key, value in doc.items():
        kwargs[key] = tuple(value) if key in _TUPLE_FIELDS and value is not None else value
    base = path.parent

    def resolve(name):
        return str(base / name) if name and not Path(name).is_absolute() else name

    views = tuple(
        ViewSpec(camera=resolve(v.camera), mask=resolve(v.mask),
                 depth=resolve(v.depth), guidance_id=v.guidance_id)
        for v in views)
    if kwargs.get("init_polyline"):
        kwargs["init_polyline"] = resolve(kwargs["init_polyline"])
    return RunConfig(views=views, **kwargs)


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def save_config(config: RunConfig, path) -> None:
    lines = []
    for name, value in vars(config).items():
        if name == "views" or value is None:
            continue
        lines.append(f"{name} = {_toml_scalar(value)}")
    for view in config.views:
        lines.append("")
        lines.append("[[views]]")
        for key in ("camera", "mask", "depth", "guidance_id"):
            value = getattr(view, key)
            if value is not None:
                lines.append(f"{key} = {_toml_scalar(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_views(config: RunConfig) -> list[ViewTarget]:
    from .depth import load_depth
    views = []
    for spec in config.views:
        camera = load_camera(spec.camera)
        mask = load_mask_png(spec.mask) if spec.mask else None
        depth = load_depth(spec.depth) if spec.depth else None
        views.append(ViewTarget(camera=camera, mask=mask, depth=depth,
                                guidance_id=spec.guidance_id))
    return views


# ---------------------------------------------------------------------------
# Multi-scale MSE
# ---------------------------------------------------------------------------

def _pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[:h - h % 2, :w - w % 2]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def mmse_loss(render: np.ndarray, mask: np.ndarray, alpha: float,
              levels: int = 4) -> tuple[float, np.ndarray]:
    """Multi-scale MSE against alpha * mask; returns (loss, d loss / d render).

    Mean of per-level MSEs over a factor-2 mean-pooled pyramid; the gradient
    includes the pooling adjoint. Levels stop early if an image dimension
    drops below 2 pixels.
    """
    if render.shape != mask.shape:
        raise ValueError("render and mask dimensions differ")
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must be in (0, 1]")
    if levels < 1:
        raise ValueError("need at least one pyramid level")
    cur_r = render
    cur_t = alpha * mask
    losses = []
    level_grads = []
    shapes = [render.shape]
    for _ in range(levels):
        diff = cur_r - cur_t
        losses.append(float(np.mean(diff * diff)))
        level_grads.append(2.0 * diff / diff.size)
        if min(cur_r.shape) < 4:
            break
        cur_r = _pool2(cur_r)
        cur_t = _pool2(cur_t)
        shapes.append(cur_r.shape)
    n_levels = len(losses)
    grad = np.zeros_like(render)
    for lvl in range(n_levels):
        g = level_grads[lvl]
        for up_to in range(lvl - 1, -1, -1):
            up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
            padded = np.zeros(shapes[up_to])  # odd rows/cols receive nothing
            padded[:up.shape[0], :up.shape[1]] = up
            g = padded
        grad += g
    return sum(losses) / n_levels, grad / n_levels


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape))

    def reset_rows(self, rows) -> None:
        rows = np.asarray(rows, dtype=int)
        if rows.size:
            self.m[rows] = 0.0
            self.v[rows] = 0.0


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr, betas=(0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; mutates state, returns new params."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shapes differ")
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Total loss
# ---------------------------------------------------------------------------

class _BridgeBroker:
    """Lazily connected guidance client shared across a run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.client: GuidanceClient | None = None

    def request(self, render, view_id, iter_progress):
        if self.config.bridge_address is None:
            raise ValueError("no bridge address configured (set bridge_address "
                             "or the WIRE4D_BRIDGE environment variable)")
        if self.client is None:
            self.client = GuidanceClient(self.config.bridge_address,
                                         self.config.bridge_timeout)
        return self.client.request_gradient(render, view_id, iter_progress)

    def close(self):
        if self.client is not None:
            self.client.close()
            self.client = None


def request_external_gradient(render: np.ndarray, view: ViewTarget,
                              config: RunConfig, iter_progress: float = 0.0,
                              broker: _BridgeBroker | None = None) -> np.ndarray:
    """Fetch d loss / d pixels for a render from the configured bridge."""
    own = broker is None
    if broker is None:
        broker = _BridgeBroker(config)
    try:
        return broker.request(render, view.guidance_id or "", iter_progress)
    finally:
        if own:
            broker.close()


def total_loss(wire: Wire4D, views, config: RunConfig,
               iter_progress: float = 0.0, broker: _BridgeBroker | None = None,
               ) -> tuple[float, np.ndarray, dict]:
    """Full objective and its exact gradient on the raw controls.

    Returns (loss, gradient, parts); parts holds per-term scalars for the
    run log. External-guidance terms contribute gradient only; their scalar
    loss is unknown to the kernel and logged as 0.
    """
    if not views:
        raise ValueError("need at least one view")
    settings = config.raster_settings()
    vis_params = config.visibility_params()
    grad = np.zeros_like(wire.controls)
    image_loss = 0.0
    parts: dict = {"mmse": []}
    from .guidance import BridgeError

    for v_idx, view in enumerate(views):
        cam = view.camera
        batch = project_wire(wire, cam, config.epsilon_px)
        if view.depth is not None:
            z_mesh = np.stack([
                sample_depth(view.depth, batch.points[:, 0, :]),
                sample_depth(view.depth, batch.points[:, 3, :]),
            ], axis=1)
            vis, dvis = soft_visibility(z_mesh, batch.depths, vis_params)
            render_batch = StrokeBatch2D(batch.points, batch.widths * vis,
                                         batch.depths, batch.provenance,
                                         batch.counts)
        else:
            vis = dvis = None
            render_batch = batch
        render = rasterize(render_batch, cam.width, cam.height, settings)

        pixel_grad = np.zeros_like(render)
        view_mmse = 0.0
        if view.mask is not None and config.lambda_mmse != 0.0:
            l_mmse, g_mmse = mmse_loss(render, view.mask, config.alpha,
                                       config.mmse_levels)
            view_mmse = l_mmse
            pixel_grad += config.lambda_mmse * g_mmse
        parts["mmse"].append(view_mmse)
        image_loss += config.lambda_mmse * view_mmse

        if view.guidance_id is not None and config.lambda_clip != 0.0:
            try:
                g_ext = request_external_gradient(render, view, config,
                                                  iter_progress, broker)
                pixel_grad += config.lambda_clip * g_ext
            except BridgeError:
                if config.on_bridge_error == "abort":
                    raise
        sgrad = rasterize_backward(render_batch, cam.width, cam.height,
                                   settings, pixel_grad)
        if vis is not None:
            d_widths = sgrad.d_widths * vis
            d_depths = sgrad.d_widths * batch.widths * dvis
        else:
            d_widths = sgrad.d_widths
            d_depths = None
        grad += backprop_projection(
            StrokeBatchGrad(batch, sgrad.d_points, d_widths, d_depths),
            wire, cam)

    jerk, jerk_grad = jerk_energy(wire)
    loss = config.lambda_i * image_loss + config.lambda_g * jerk
    grad = config.lambda_i * grad + config.lambda_g * jerk_grad
    parts["jerk"] = jerk
    parts["image"] = image_loss
    return loss, grad, parts


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def _insert_zero_window(arr: np.ndarray, k: int) -> np.ndarray:
    """State rows through one knot insertion at span k: blends start cold."""
    n = arr.shape[0]
    out = np.zeros((n + 1,) + arr.shape[1:])
    out[:k - DEGREE + 1] = arr[:k - DEGREE + 1]
    out[k + 1:] = arr[k:]
    return out


def reinit_volume(config: RunConfig, views) -> InitVolume:
    if config.init_kind == "sphere" or not views:
        return InitVolume("sphere", radius=config.init_radius,
                          center=config.init_center)
    if config.init_kind == "silhouette_cone":
        first = views[0]
        if first.mask is None:
            raise ValueError("silhouette_cone init needs a mask on the first view")
        depth_range = config.init_depth_range
        if depth_range is None:
            subject = float(np.linalg.norm(first.camera.translation))
            depth_range = (max(subject - 0.5, first.camera.near * 2), subject + 0.5)
        return InitVolume("silhouette_cone", mask=first.mask, camera=first.camera,
                          depth_range=depth_range)
    return InitVolume("sphere", radius=config.init_radius, center=config.init_center)


def run_schedule(config: RunConfig, wire: Wire4D, views,
                 progress_callback=None) -> tuple[Wire4D, list[dict]]:
    """Optimize for config.iterations steps with scheduled topology events.

    Returns the final wire and the per-iteration log (JSON-serializable
    records; topology events carry "pruned" / "inserted_spans" fields).
    Deterministic for a fixed config and inputs.
    """
    views = list(views)
    log: list[dict] = []
    if config.iterations == 0:
        return wire, log
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros(wire.controls.shape)
    history = GradientHistory(config.gradient_window)
    volume = reinit_volume(config, views)
    broker = _BridgeBroker(config)
    lr = np.array([[config.lr_position] * 3 + [config.lr_width]])
    try:
        for it in range(config.iterations):
            progress = it / max(config.iterations - 1, 1)
            loss, grad, parts = total_loss(wire, views, config, progress, broker)
            wire = wire.with_controls(
                adam_step(wire.controls, grad, state, lr,
                          config.adam_betas, config.adam_eps))
            history.push(grad)
            record = {
                "iter": it + 1,
                "loss": loss,
                "image": parts["image"],
                "jerk": parts["jerk"],
                "mmse": parts["mmse"],
            }
            step = it + 1
            if step in config.reinit_iters:
                event_seed = int(rng.integers(0, 2**63 - 1))
                prune = detect_prune_set(wire, config.effective_width_epsilon)
                wire, report = width_guided_reinit(
                    wire, prune, volume, rng_seed=event_seed,
                    reset_width=config.initial_width)
                state.reset_rows(prune)
                record["pruned"] = list(report.pruned_indices)
            if config.refine_iter is not None and step == config.refine_iter:
                knots_before = wire.knots
                wire, inserted = gradient_knot_refine(
                    wire, history, config.refine_insert_count)
                cur = np.array(knots_before)
                for _, u_hat in inserted:
                    k = int(find_spans(cur, np.array([u_hat]))[0])
                    state.m = _insert_zero_window(state.m, k)
                    state.v = _insert_zero_window(state.v, k)
                    cur = np.insert(cur, k + 1, u_hat)
                history.reset()
                record["inserted_spans"] = [int(row) for row, _ in inserted]
            log.append(record)
            if progress_callback is not None:
                progress_callback(it + 1, wire, record)
    finally:
        broker.close()
    return wire, log
