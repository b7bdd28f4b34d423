"""Training loop: noise-prediction objective, EMA tracking, resumable
checkpoints.

Every stochastic draw in step ``s`` comes from a fresh generator seeded by
(run seed, s), so an interrupted-and-resumed run retraces the uninterrupted
one exactly. The checkpoint directory is owned by one process at a time via
a lockfile.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .degrade import degrade_volume
from .diffusion import (SamplerConfig, VariantConfig, reconstruct_output,
                        sample, training_target)
from .metrics import psnr, ssim
from .pipeline import (SlicePair, SlicePairFactory, extract_slices, make_pair,
                       pad_reflect, slice_has_content)
from .profiles import design_slice_profile
from .schedule import NoiseSchedule
from .synthetic import phantom_slices
from .unet import DenoiserUNet, NetConfig, TorchDenoiser
from .volume import DataError, load_volume

CKPT_NAME = "state.pt"
CONFIG_NAME = "config.yaml"
LOCK_NAME = ".lock"


class DivergenceError(RuntimeError):
    """Raised when the training loss goes non-finite."""


class CheckpointLockError(RuntimeError):
    pass


def step_rng(seed: int, step: int, *extra) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step) + extra))


# ---------------------------------------------------------------------------
# datasets

class PairDataset:
    """A list of base slice pairs plus the factory used to augment them.

    Pairs are bucketed by HR shape so a batch can always be stacked.
    """

    def __init__(self, pairs, factory: SlicePairFactory, holdout: int = 0):
        if len(pairs) == 0:
            raise DataError("dataset contains no usable slice pairs")
        if holdout >= len(pairs):
            raise DataError(
                f"holdout {holdout} leaves no training pairs out of {len(pairs)}")
        self.factory = factory
        self.train_pairs = pairs[:len(pairs) - holdout] if holdout else pairs
        self.holdout_pairs = pairs[len(pairs) - holdout:] if holdout else []
        self.buckets = {}
        for i, pair in enumerate(self.train_pairs):
            self.buckets.setdefault(pair.hr.shape, []).append(i)
        self._bucket_keys = sorted(self.buckets)
        self._bucket_weights = np.array(
            [len(self.buckets[k]) for k in self._bucket_keys], dtype=np.float64)
        self._bucket_weights /= self._bucket_weights.sum()

    def draw_batch_indices(self, rng: np.random.Generator, batch_size: int):
        """Batch indices from one shape bucket (weighted by bucket size)."""
        if len(self._bucket_keys) == 1:
            return rng.integers(0, len(self.train_pairs), size=batch_size)
        key = self._bucket_keys[rng.choice(len(self._bucket_keys),
                                           p=self._bucket_weights)]
        members = self.buckets[key]
        return rng.choice(members, size=batch_size, replace=True)

    def __len__(self):
        return len(self.train_pairs)


def synthetic_dataset(config: RunConfig) -> PairDataset:
    dc = config.data
    acq = config.acquisition
    profile = design_slice_profile(acq.thickness, acq.spacing, acq.profile)
    k = int(round((acq.thickness + acq.gap) / acq.spacing))
    factory = SlicePairFactory(profile, k)
    slices = phantom_slices(dc.n_slices, dc.size, dc.seed)
    pairs = [factory.from_hr(s, aniso_axis=0, orientation="synthetic")
             for s in slices]
    return PairDataset(pairs, factory, holdout=dc.holdout)


def read_manifest(path):
    """Manifest lines: <volume path> <role> <contrast>; '#' comments allowed."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'path role contrast'")
        vol_path, role, contrast = parts
        if role not in ("train", "val", "test"):
            raise DataError(f"{path}:{lineno}: unknown role {role!r}")
        entries.append((vol_path, role, contrast))
    return entries


def manifest_dataset(config: RunConfig, orientations=None) -> PairDataset:
    dc = config.data
    if not dc.manifest:
        raise DataError("data.kind is 'manifest' but data.manifest is not set")
    entries = [e for e in read_manifest(dc.manifest) if e[2] in dc.contrasts]
    acq = config.acquisition
    profile = design_slice_profile(acq.thickness, acq.spacing, acq.profile)

    pairs_by_role = {"train": [], "val": [], "test": []}
    factory = None
    for vol_path, role, _contrast in entries:
        hr_vol = load_volume(vol_path)
        spec = acq.build_spec(hr_vol.orientation)
        if factory is None:
            factory = SlicePairFactory(profile, spec.k)
        lr_vol = degrade_volume(hr_vol, profile, spec)
        hr_stacks = extract_slices(hr_vol, spec.through_plane_axis)
        lr_stacks = extract_slices(lr_vol, spec.through_plane_axis)
        for plane, (lr_slices, _fixed, aniso) in lr_stacks.items():
            if orientations and plane not in orientations:
                continue
            hr_slices = hr_stacks[plane][0]
            for hr_sl, lr_sl in zip(hr_slices, lr_slices):
                if not slice_has_content(hr_sl, dc.min_nonzero_frac):
                    continue
                if np.ptp(lr_sl) == 0:
                    continue
                pairs_by_role[role].append(
                    make_pair(hr_sl, lr_sl, spec.k, aniso, orientation=plane))
    pairs = pairs_by_role["train"] + pairs_by_role["val"]
    holdout = len(pairs_by_role["val"])
    if factory is None:
        raise DataError("manifest selected no volumes")
    return PairDataset(pairs, factory, holdout=holdout)


def build_dataset(config: RunConfig, orientations=None) -> PairDataset:
    if config.data.kind == "synthetic":
        return synthetic_dataset(config)
    if config.data.kind == "manifest":
        return manifest_dataset(config, orientations)
    raise DataError(f"unknown data kind {config.data.kind!r}")


# ---------------------------------------------------------------------------
# batching

def padded_batch(pairs, variant: VariantConfig, multiple: int):
    """Stack pairs into (z0, cond) arrays, reflect-padding to the net multiple."""
    z0s, conds = [], []
    for pair in pairs:
        hr_p, pad = pad_reflect(pair.hr, multiple)
        up_p, _ = pad_reflect(pair.up_lr, multiple)
        padded = SlicePair(hr=hr_p, lr=pair.lr, up_lr=up_p,
                           orientation=pair.orientation, aniso_axis=pair.aniso_axis,
                           k=pair.k, norm=pair.norm, pad=pad, crop=pair.crop)
        z0, cond = training_target(padded, variant)
        z0s.append(z0)
        conds.append(cond)
    return np.stack(z0s), np.stack(conds)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(out_dir: Path, step: int, net: DenoiserUNet, ema_state: dict,
                    optimizer: torch.optim.Optimizer):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "step": step,
        "model": net.state_dict(),
        "ema": ema_state,
        "optimizer": optimizer.state_dict(),
        "net_config": net.config.to_dict(),
    }
    tmp = out_dir / (CKPT_NAME + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, out_dir / CKPT_NAME)


def load_checkpoint(ckpt_dir) -> tuple[RunConfig, dict]:
    ckpt_dir = Path(ckpt_dir)
    state_path = ckpt_dir / CKPT_NAME
    config_path = ckpt_dir / CONFIG_NAME
    if not state_path.exists() or not config_path.exists():
        raise DataError(f"{ckpt_dir} is not a checkpoint directory")
    config = RunConfig.load(config_path)
    payload = torch.load(state_path, map_location="cpu", weights_only=False)
    return config, payload


def load_denoiser(ckpt_dir, use_ema: bool = True) -> tuple[RunConfig, DenoiserUNet]:
    config, payload = load_checkpoint(ckpt_dir)
    net = DenoiserUNet(NetConfig.from_dict(payload["net_config"]))
    net.load_state_dict(payload["ema"] if use_ema else payload["model"])
    net.eval()
    return config, net


class _Lock:
    def __init__(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        self.path = directory / LOCK_NAME
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CheckpointLockError(
                f"{directory} is locked by another training process "
                f"(remove {self.path} if that process is gone)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)

    def release(self):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


# ---------------------------------------------------------------------------
# the loop

def parameter_digest(state: dict) -> str:
    """Stable hash of a parameter state dict (for determinism checks)."""
    import hashlib
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(np.ascontiguousarray(state[key].detach().numpy()).tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    ckpt_dir: Path
    steps: int
    final_loss: float
    val_history: list


def validate(net: DenoiserUNet, dataset: PairDataset, config: RunConfig,
             sched: NoiseSchedule, variant: VariantConfig, step: int):
    """PSNR/SSIM of fast-sampler outputs on held-out pairs."""
    items = dataset.holdout_pairs[:config.train.val_items] or \
        dataset.train_pairs[:config.train.val_items]
    model = TorchDenoiser(net)
    sampler = SamplerConfig(kind="ddim", steps=min(config.train.val_sampler_steps,
                                                   sched.T), eta=0.0)
    scores = []
    for i, pair in enumerate(items):
        rng = step_rng(config.seed, step, 1, i)
        _, conds = padded_batch([pair], variant, net.config.divisor)
        z0_hat = sample(model, conds[0], sched, variant, sampler, rng)
        _, pad = pad_reflect(pair.hr, net.config.divisor)
        sr = reconstruct_output(z0_hat, conds[0], variant, pad=pad)
        scores.append((psnr(pair.hr, sr), ssim(pair.hr, sr)))
    mean = np.mean(np.asarray(scores), axis=0)
    return float(mean[0]), float(mean[1])


def train(config: RunConfig, out_dir=None, resume: bool = False,
          quiet: bool = False) -> TrainResult:
    out_dir = Path(out_dir if out_dir is not None else config.output_dir)
    lock = _Lock(out_dir)
    try:
        return _train_locked(config, out_dir, resume, quiet)
    finally:
        lock.release()


def _train_locked(config: RunConfig, out_dir: Path, resume: bool,
                  quiet: bool) -> TrainResult:
    tc = config.train
    variant = config.variant.build()
    sched = config.schedule.build()
    dataset = build_dataset(config)
    net_config = config.build_net_config()

    torch.manual_seed(config.seed)
    net = DenoiserUNet(net_config)
    optimizer = torch.optim.Adam(net.parameters(), lr=tc.lr)
    ema_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    start_step = 0

    if resume:
        _, payload = load_checkpoint(out_dir)
        net.load_state_dict(payload["model"])
        ema_state = payload["ema"]
        optimizer.load_state_dict(payload["optimizer"])
        start_step = payload["step"]
    config.save(out_dir / CONFIG_NAME)

    multiple = net_config.divisor
    policy = config.augment
    val_history = []
    last_loss = float("nan")

    net.train()
    for step in range(start_step, tc.steps):
        rng = step_rng(config.seed, step)
        idx = dataset.draw_batch_indices(rng, tc.batch_size)
        pairs = []
        for i in idx:
            pair = dataset.train_pairs[int(i)]
            if policy != "none":
                pair = dataset.factory.augment(pair, policy, rng)
            pairs.append(pair)
        z0_np, cond_np = padded_batch(pairs, variant, multiple)
        t_np = rng.integers(1, sched.T + 1, size=tc.batch_size)
        eps_np = rng.standard_normal(z0_np.shape)

        tau_t = None
        if variant.nca:
            tau_np = rng.uniform(0.0, variant.tau_max, size=tc.batch_size)
            cond_np = cond_np + tau_np[:, None, None] * rng.standard_normal(cond_np.shape)
            tau_t = torch.tensor(tau_np, dtype=torch.float32)

        ab = sched.alpha_bar[t_np][:, None, None]
        zt_np = np.sqrt(ab) * z0_np + np.sqrt(1.0 - ab) * eps_np

        x = torch.tensor(np.stack([zt_np, cond_np], axis=1), dtype=torch.float32)
        eps_t = torch.tensor(eps_np, dtype=torch.float32)[:, None]
        t_t = torch.tensor(t_np, dtype=torch.float32)

        pred = net(x, t_t, tau_t)
        loss = torch.mean((pred - eps_t) ** 2)
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at step {step}; last checkpoint retained in {out_dir}")
        optimizer.zero_grad()
        loss.backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(net.parameters(), tc.grad_clip)
        optimizer.step()
        last_loss = float(loss.item())

        with torch.no_grad():
            decay = tc.ema_decay
            for key, value in net.state_dict().items():
                if value.dtype.is_floating_point:
                    ema_state[key].mul_(decay).add_(value, alpha=1.0 - decay)
                else:
                    ema_state[key].copy_(value)

        done = step + 1
        if tc.val_every and done % tc.val_every == 0:
            eval_net = DenoiserUNet(net_config)
            eval_net.load_state_dict(ema_state)
            eval_net.eval()
            val_psnr, val_ssim = validate(eval_net, dataset, config, sched,
                                          variant, done)
            val_history.append((done, val_psnr, val_ssim))
            if not quiet:
                print(f"step {done}: loss {last_loss:.4f} "
                      f"val psnr {val_psnr:.2f} dB ssim {val_ssim:.4f}", flush=True)
            net.train()
        elif not quiet and done % max(1, tc.steps // 10) == 0:
            print(f"step {done}: loss {last_loss:.4f}", flush=True)

        if (tc.checkpoint_every and done % tc.checkpoint_every == 0) or done == tc.steps:
            save_checkpoint(out_dir, done, net, ema_state, optimizer)

    return TrainResult(ckpt_dir=out_dir, steps=tc.steps, final_loss=last_loss,
                       val_history=val_history)
