"""Two-stage training orchestration: warm-up, weighted-Langevin exploration with
density control on a fixed cadence, then the switch to quasi-Newton-guided
exploitation with the L2 photometric term and the multiplier disabled.

One Trainer owns all mutable state (cloud, moments, bin weights, histories,
RNG); checkpoints capture the lot bit-exactly, so a reloaded run continues
byte-identically.
"""

import json
import math
import time
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from . import density, exploitation, exploration, losses, rendering
from .adam import AdamState
from .exploration import (BinWeights, EnergyPartition, FlatteningConfig,
                          NoiseGate, bin_index)
from .model import GaussianCloud, inverse_sigmoid
from .rendering import PARAM_GROUPS

TELEMETRY_COLUMNS = ("iter", "stage", "loss_total", "loss_photo", "energy_bin",
                     "nu", "psnr", "n_gaussians", "rejected_pairs", "relocations")

CHECKPOINT_VERSION = 1


class TrainerAbort(RuntimeError):
    """Raised when the loss is non-finite twice in a row."""


@dataclass(frozen=True)
class TrainConfig:
    # schedule
    total_iters: int = 3000
    switch_iter: int = 2900
    warmup_iters: int = 250
    densify_interval: int = 100
    growth_rate: float = 0.05
    max_gaussians: int = 1000
    snapshot_interval: int = 0
    seed: int = 0
    # stage toggles (ablation arms)
    use_flattening: bool = True
    use_exploitation: bool = True
    # model / init
    init_gaussians: int = 500
    init_scale_frac: float = 0.6
    opacity_floor: float = 0.005
    dtype: str = "float32"
    background: tuple = (0.0, 0.0, 0.0)
    # learning rates per parameter group; position lr decays exponentially
    lr_mu: float = 0.16
    lr_log_scale: float = 0.02
    lr_rot_angle: float = 0.02
    lr_opacity_logit: float = 0.05
    lr_color: float = 0.04
    lr_mu_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # loss
    lambda_ssim: float = 0.2
    lambda_o: float = 0.01
    lambda_sigma: float = 0.01
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    # flat-histogram machinery
    n_bins: int = 200
    energy_lo: float = 0.0
    energy_hi: float = 0.2
    zeta: float = 0.75
    tau: float = 1.0
    weight_lr: float = 0.01
    weight_lr_decay_t0: float = 0.0
    weight_lr_decay_exp: float = 0.6
    nu_min: float = 0.1
    nu_max: float = 20.0
    weight_floor: float = 1e-12
    value_clamp: bool = False
    energy_ema: float = 0.0
    # langevin noise
    lambda_noise: float = 0.1
    noise_sharpness: float = 100.0
    noise_threshold: float = 0.005
    gate_sign: int = 1
    # exploitation
    history_size: int = 5
    curvature_eps: float = 1e-10
    reset_position_adam_on_switch: bool = False

    def validate(self):
        if not (0 <= self.warmup_iters <= self.switch_iter <= self.total_iters):
            raise ValueError("need 0 <= warmup_iters <= switch_iter <= total_iters")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        if self.growth_rate < 0:
            raise ValueError("growth_rate must be >= 0")
        if self.init_gaussians < 1 or self.init_gaussians > self.max_gaussians:
            raise ValueError("init_gaussians must be in 1..max_gaussians")
        if not (1 <= self.history_size):
            raise ValueError("history_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        for name in ("lr_mu", "lr_log_scale", "lr_rot_angle", "lr_opacity_logit",
                     "lr_color", "lr_mu_decay", "growth_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        # constructing the sub-configs runs their own validation
        self.flattening()
        self.loss_config()
        EnergyPartition(self.n_bins, self.energy_lo, self.energy_hi)
        return self

    def flattening(self) -> FlatteningConfig:
        return FlatteningConfig(
            zeta=self.zeta, tau=self.tau, weight_lr=self.weight_lr,
            warmup_iters=self.warmup_iters, nu_min=self.nu_min, nu_max=self.nu_max,
            weight_floor=self.weight_floor, value_clamp=self.value_clamp,
            weight_lr_decay_t0=self.weight_lr_decay_t0,
            weight_lr_decay_exp=self.weight_lr_decay_exp,
            energy_ema=self.energy_ema)

    def noise_gate(self) -> NoiseGate:
        return NoiseGate(sharpness=self.noise_sharpness, threshold=self.noise_threshold,
                         lambda_noise=self.lambda_noise, gate_sign=self.gate_sign)

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(
            lambda_ssim=self.lambda_ssim, lambda_o=self.lambda_o,
            lambda_sigma=self.lambda_sigma, ssim_window=self.ssim_window,
            ssim_sigma=self.ssim_sigma, ssim_c1=self.ssim_c1, ssim_c2=self.ssim_c2)

    def lrs(self, iteration: int) -> dict:
        span = max(self.total_iters - 1, 1)
        decay = self.lr_mu_decay ** (iteration / span)
        return {
            "mu": self.lr_mu * decay,
            "log_scale": self.lr_log_scale,
            "rot_angle": self.lr_rot_angle,
            "opacity_logit": self.lr_opacity_logit,
            "color": self.lr_color,
        }


_TUPLE_FIELDS = {"background"}


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            v = ",".join(repr(float(x)) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    """Parse `key = value` lines; unknown keys are errors."""
    known = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, val, known[key])
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def _parse_value(key, val, f):
    if key in _TUPLE_FIELDS:
        parts = [p for p in val.split(",") if p.strip()]
        if len(parts) != 3:
            raise ValueError(f"{key} wants three comma-separated floats")
        return tuple(float(p) for p in parts)
    base = TrainConfig()
    kind = type(getattr(base, key))
    if kind is bool:
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key} wants a boolean, got {val!r}")
    if kind is int:
        return int(val)
    if kind is float:
        return float(val)
    return val


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def init_random(count: int, width: int, height: int, target, rng,
                max_count=None, scale_frac=0.6, dtype=np.float32) -> GaussianCloud:
    """Random cloud: uniform positions, scales from mean nearest-neighbor spacing,
    opacity 0.5, colors bilinearly sampled from the target at each position."""
    if count < 1:
        raise ValueError("count must be >= 1")
    max_count = max_count or count
    if count > max_count:
        raise ValueError(f"count {count} exceeds max_count {max_count}")
    mu = np.stack([rng.uniform(0.0, width - 1.0, count),
                   rng.uniform(0.0, height - 1.0, count)], axis=1)
    if count > 1:
        dists, _ = cKDTree(mu).query(mu, k=2)
        spacing = float(dists[:, 1].mean())
    else:
        spacing = 0.25 * (width + height) / 2.0
    sigma = max(scale_frac * spacing, 0.5)
    log_scale = np.full((count, 2), np.log(sigma))
    colors = _bilinear_sample(np.asarray(target, dtype=np.float64), mu)
    return GaussianCloud(
        mu=mu, log_scale=log_scale, rot_angle=np.zeros(count),
        opacity_logit=np.full(count, float(inverse_sigmoid(0.5))),
        color=colors, max_count=max_count, dtype=dtype)


def _bilinear_sample(img, pts):
    h, w = img.shape[:2]
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
            + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)


@dataclass
class FitReport:
    psnr: float
    ssim: float
    n_gaussians: int
    wall_time: float
    final_loss: float
    aborted: bool = False


def format_telemetry_row(row) -> str:
    out = []
    for col, v in zip(TELEMETRY_COLUMNS, row):
        if isinstance(v, float):
            out.append(f"{v:.12g}")
        else:
            out.append(str(v))
    return ",".join(out)


class Trainer:
    """Owns one fit: per-iteration render -> loss -> backward -> stage step,
    density control on cadence, telemetry rows, snapshots and checkpoints."""

    def __init__(self, target, cfg: TrainConfig, cloud: GaussianCloud | None = None):
        cfg.validate()
        self.cfg = cfg
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.ndim != 3 or self.target.shape[2] != 3:
            raise ValueError("target must be an (H, W, 3) image")
        self.height, self.width = self.target.shape[:2]
        self.rng = np.random.default_rng(cfg.seed)
        dtype = np.float32 if cfg.dtype == "float32" else np.float64
        if cloud is None:
            cloud = init_random(cfg.init_gaussians, self.width, self.height,
                                self.target, self.rng, max_count=cfg.max_gaussians,
                                scale_frac=cfg.init_scale_frac, dtype=dtype)
            cloud.rng_seed = cfg.seed
        self.cloud = cloud
        self.partition = EnergyPartition(cfg.n_bins, cfg.energy_lo, cfg.energy_hi)
        self.weights = BinWeights.uniform(cfg.n_bins)
        self.gate = cfg.noise_gate()
        self.flat_cfg = cfg.flattening()
        self.adam_states = {
            g: AdamState.zeros(self.cloud.params(g).shape, beta1=cfg.adam_beta1,
                               beta2=cfg.adam_beta2, eps_hat=cfg.adam_eps)
            for g in PARAM_GROUPS}
        self.exploit = exploitation.ExploitState.fresh(
            self.cloud.n, cfg.history_size, cfg.curvature_eps)
        self.iteration = 0
        self.nonfinite_streak = 0
        self.smoothed_energy = None
        self.telemetry: list = []
        self.events: list = []
        self.sampler_log: list = []   # (iter, weight_drift, fallbacks)
        self._switched = False

    # -- stage helpers -------------------------------------------------------

    def stage(self, iteration=None) -> str:
        it = self.iteration if iteration is None else iteration
        if self.cfg.use_exploitation and it >= self.cfg.switch_iter:
            return losses.EXPLOITATION
        return losses.EXPLORATION

    def _maybe_switch(self):
        if self.stage() == losses.EXPLOITATION and not self._switched:
            self._switched = True
            self.exploit = exploitation.ExploitState.fresh(
                self.cloud.n, self.cfg.history_size, self.cfg.curvature_eps)
            if self.cfg.reset_position_adam_on_switch:
                self.adam_states["mu"] = AdamState.zeros(
                    self.cloud.mu.shape, beta1=self.cfg.adam_beta1,
                    beta2=self.cfg.adam_beta2, eps_hat=self.cfg.adam_eps)

    # -- one iteration -------------------------------------------------------

    def step(self):
        cfg = self.cfg
        it = self.iteration
        stage = self.stage()
        self._maybe_switch()
        loss_cfg = losses.photometric_swap(cfg.loss_config(), stage)
        out = rendering.render(self.cloud, self.width, self.height, cfg.background)
        result = losses.total_loss(out.image, self.target, self.cloud, loss_cfg)

        if not math.isfinite(result.energy):
            self.nonfinite_streak += 1
            if self.nonfinite_streak >= 2:
                raise TrainerAbort(f"loss non-finite twice in a row at iteration {it}")
            self._log(it, stage, result, exploration.StepInfo(rejected=True), out)
            self.iteration += 1
            return
        self.nonfinite_streak = 0

        energy = result.energy
        if cfg.energy_ema > 0.0:
            self.smoothed_energy = (energy if self.smoothed_energy is None else
                                    cfg.energy_ema * self.smoothed_energy
                                    + (1.0 - cfg.energy_ema) * energy)
            energy = self.smoothed_energy

        grads = rendering.backward(self.cloud, out, result.d_image)
        grads.add_(result.d_params)
        lrs = cfg.lrs(it)

        if stage == losses.EXPLORATION:
            info = exploration.exploration_step(
                self.cloud, grads,
                self.weights if cfg.use_flattening else None,
                self.partition,
                self.flat_cfg if cfg.use_flattening else None,
                self.gate, self.adam_states, self.rng,
                energy=energy, lrs=lrs, iteration=it)
            relocations = 0
            if (it > 0 and it % cfg.densify_interval == 0):
                relocations = self._density_control(it)
        else:
            info = exploitation.exploitation_step(
                self.cloud, grads, self.exploit, self.adam_states,
                self.gate, self.rng, lrs=lrs)
            info.bin = bin_index(energy, self.partition)
            relocations = 0

        self._log(it, stage, result, info, out, relocations)
        self.sampler_log.append((it, info.weight_drift, info.fallbacks))
        self.iteration += 1

    def _density_control(self, it) -> int:
        states = [self.adam_states[g] for g in PARAM_GROUPS] + [self.exploit]
        moved = 0
        try:
            for ev in density.relocate_dead(self.cloud, self.cfg.opacity_floor,
                                            self.rng, states):
                moved += len(ev.indices)
                self.events.append((it, ev))
            for ev in density.grow(self.cloud, self.cfg.growth_rate, self.rng, states):
                self.events.append((it, ev))
        except ValueError as err:
            # no live sampling target; skip this round and let gradients recover
            self.events.append((it, density.DensityEvent("skipped", -1, 0, [], 0.0)))
            self.sampler_log.append((it, float("nan"), str(err)))
        return moved

    def _log(self, it, stage, result, info, out, relocations=0):
        img = np.clip(out.image.astype(np.float64), 0.0, 1.0)
        row = (it, stage, float(result.energy), float(result.photometric),
               int(info.bin), float(info.nu), rendering.psnr(self.target, img),
               self.cloud.n, int(info.rejected_pairs), int(relocations))
        self.telemetry.append(row)

    # -- full run ------------------------------------------------------------

    def run(self, out_dir=None, snapshot_hook=None) -> FitReport:
        t0 = time.time()
        aborted = False
        try:
            while self.iteration < self.cfg.total_iters:
                self.step()
                k = self.iteration
                if (self.cfg.snapshot_interval > 0 and out_dir is not None
                        and (k % self.cfg.snapshot_interval == 0
                             or k == self.cfg.total_iters)):
                    self._snapshot(out_dir, k)
                if snapshot_hook is not None:
                    snapshot_hook(self)
        except TrainerAbort:
            aborted = True
            if out_dir is not None:
                self.save_checkpoint(f"{out_dir}/abort_checkpoint.npz")
            raise
        finally:
            self.report = self._final_report(time.time() - t0, aborted)
        return self.report

    def _snapshot(self, out_dir, k):
        out = rendering.render(self.cloud, self.width, self.height, self.cfg.background)
        rendering.save_image(f"{out_dir}/snapshot_{k:06d}.png", out.image)
        self.save_checkpoint(f"{out_dir}/checkpoint_{k:06d}.npz")

    def _final_report(self, wall, aborted=False) -> FitReport:
        out = rendering.render(self.cloud, self.width, self.height, self.cfg.background)
        img = np.clip(out.image.astype(np.float64), 0.0, 1.0)
        cfg = self.cfg
        ssim = losses.ssim_value(img, self.target, window=cfg.ssim_window,
                                 sigma=cfg.ssim_sigma, c1=cfg.ssim_c1, c2=cfg.ssim_c2) \
            if min(self.height, self.width) >= cfg.ssim_window else float("nan")
        loss_cfg = losses.photometric_swap(cfg.loss_config(), self.stage())
        final_loss = losses.total_loss(out.image, self.target, self.cloud,
                                       loss_cfg).energy
        return FitReport(psnr=rendering.psnr(self.target, img), ssim=float(ssim),
                         n_gaussians=self.cloud.n, wall_time=wall,
                         final_loss=float(final_loss), aborted=aborted)

    def telemetry_text(self) -> str:
        lines = [",".join(TELEMETRY_COLUMNS)]
        lines.extend(format_telemetry_row(r) for r in self.telemetry)
        return "\n".join(lines) + "\n"

    def events_text(self) -> str:
        lines = ["iter,event,target,n_way,indices,entropy"]
        for it, ev in self.events:
            idx = "|".join(str(i) for i in ev.indices)
            lines.append(f"{it},{ev.kind},{ev.target},{ev.n_way},{idx},{ev.entropy:.12g}")
        return "\n".join(lines) + "\n"

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path):
        meta = {
            "version": CHECKPOINT_VERSION,
            "iteration": self.iteration,
            "nonfinite_streak": self.nonfinite_streak,
            "smoothed_energy": self.smoothed_energy,
            "switched": self._switched,
            "rng_state": self.rng.bit_generator.state,
            "adam_steps": {g: self.adam_states[g].step for g in PARAM_GROUPS},
            "exploit_rejected": self.exploit.rejected_total,
            "exploit_fallbacks": self.exploit.fallback_total,
            "config": config_to_text(self.cfg),
        }
        arrays = {
            "mu": self.cloud.mu, "log_scale": self.cloud.log_scale,
            "rot_angle": self.cloud.rot_angle,
            "opacity_logit": self.cloud.opacity_logit, "color": self.cloud.color,
            "depth_index": self.cloud.depth_index,
            "cloud_meta": np.array([self.cloud.max_count, self.cloud.rng_seed,
                                    self.cloud._next_depth], dtype=np.int64),
            "weights": self.weights.weights,
            "hist_s": self.exploit.history.s, "hist_y": self.exploit.history.y,
            "hist_rho": self.exploit.history.rho,
            "hist_count": self.exploit.history.count,
            "hist_head": self.exploit.history.head,
            "prev_mu": self.exploit.prev_mu, "prev_grad": self.exploit.prev_grad,
            "valid": self.exploit.valid,
        }
        for g in PARAM_GROUPS:
            arrays[f"adam_m1_{g}"] = self.adam_states[g].m1
            arrays[f"adam_m2_{g}"] = self.adam_states[g].m2
        np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)

    @classmethod
    def load_checkpoint(cls, path, target) -> "Trainer":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            cfg = config_from_text(meta["config"])
            max_count, rng_seed, next_depth = (int(v) for v in z["cloud_meta"])
            cloud = GaussianCloud(
                z["mu"], z["log_scale"], z["rot_angle"], z["opacity_logit"],
                z["color"], max_count=max_count, rng_seed=rng_seed,
                depth_index=z["depth_index"], dtype=z["mu"].dtype)
            cloud._next_depth = next_depth
            tr = cls(target, cfg, cloud=cloud)
            tr.iteration = int(meta["iteration"])
            tr.nonfinite_streak = int(meta["nonfinite_streak"])
            tr.smoothed_energy = meta["smoothed_energy"]
            tr._switched = bool(meta["switched"])
            tr.rng.bit_generator.state = meta["rng_state"]
            tr.weights = BinWeights(z["weights"])
            for g in PARAM_GROUPS:
                st = tr.adam_states[g]
                st.m1 = z[f"adam_m1_{g}"].copy()
                st.m2 = z[f"adam_m2_{g}"].copy()
                st.step = int(meta["adam_steps"][g])
            h = tr.exploit.history
            h.s = z["hist_s"].copy(); h.y = z["hist_y"].copy()
            h.rho = z["hist_rho"].copy()
            h.count = z["hist_count"].copy(); h.head = z["hist_head"].copy()
            tr.exploit.prev_mu = z["prev_mu"].copy()
            tr.exploit.prev_grad = z["prev_grad"].copy()
            tr.exploit.valid = z["valid"].copy()
            tr.exploit.rejected_total = int(meta["exploit_rejected"])
            tr.exploit.fallback_total = int(meta["exploit_fallbacks"])
        return tr


def run_fit(target, cfg: TrainConfig, out_dir=None,
            cloud: GaussianCloud | None = None):
    """Convenience wrapper: build a Trainer, run to completion, return
    (trainer, report)."""
    tr = Trainer(target, cfg, cloud=cloud)
    report = tr.run(out_dir=out_dir)
    return tr, report
