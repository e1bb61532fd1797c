"""Training loop, checkpointing, evaluation drivers, and the ablation runner.

Runs are bit-reproducible on a single device: all randomness flows from the
config seed through the torch global RNG (init, dropout) and one numpy
generator (batch order). Checkpoints capture parameters, optimizer state,
queue contents, RNG states, and the mid-epoch cursor, so a resumed run
continues the exact step sequence. Checkpoint files are deterministic bytes:
save, load, save again produces an identical file.
"""

from __future__ import annotations

import math
import pickle
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import CONV_PLACEMENTS, ConfigError, RunConfig
from .data_model import Batch, Sample, SynthConfig, pad_batch, synth_generate
from .metrics import EvalReport, evaluate
from .model import BatchTensors, MomentHighlightModel, batch_to_tensors, predict_records


class NumericalError(RuntimeError):
    """Loss or gradients stopped being finite; training aborted."""


_ND_TAG = "__ndarray__"


def _encode_state(obj):
    """Reduce tensors/arrays to (tag, dtype, shape, bytes) so checkpoint
    pickles contain only primitives and are byte-deterministic. Strings are
    interned so pickle memo references do not depend on object identity
    accidents (fresh state vs one restored from disk)."""
    if isinstance(obj, torch.Tensor):
        obj = obj.detach().cpu().numpy()
    if isinstance(obj, np.ndarray):
        return (_ND_TAG, sys.intern(obj.dtype.str), tuple(obj.shape), obj.tobytes(order="C"))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_encode_state(k): _encode_state(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_encode_state(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_encode_state(v) for v in obj)
    return obj


def _decode_state(obj):
    if isinstance(obj, tuple):
        if len(obj) == 4 and obj[0] == _ND_TAG:
            _, dtype, shape, data = obj
            return np.frombuffer(data, dtype=np.dtype(dtype)).reshape(shape).copy()
        return tuple(_decode_state(v) for v in obj)
    if isinstance(obj, dict):
        return {k: _decode_state(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_state(v) for v in obj]
    return obj


def _to_tensor(obj):
    if isinstance(obj, np.ndarray):
        return torch.from_numpy(obj.copy())
    if isinstance(obj, dict):
        return {k: _to_tensor(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_to_tensor(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_to_tensor(v) for v in obj)
    return obj


def synth_presets(config: RunConfig) -> tuple[SynthConfig, SynthConfig]:
    """Train/val generator settings derived from one config (val seed offset)."""
    base = dict(
        t_range=(config.synth_t_min, config.synth_t_max),
        n_range=(config.synth_n_min, config.synth_n_max),
        d_v=config.d_v,
        d_t=config.d_t,
        pattern_bank_size=config.synth_pattern_bank,
        noise_std=config.synth_noise_std,
        moments_per_sample=(config.synth_moments_min, config.synth_moments_max),
        clip_duration_s=config.synth_clip_duration_s,
    )
    train = SynthConfig(num_samples=config.synth_train_samples, seed=config.seed, **base)
    val = SynthConfig(num_samples=config.synth_val_samples, seed=config.seed + 1, **base)
    return train, val


class Trainer:
    def __init__(self, config: RunConfig, train_samples: list[Sample], device: str = "cpu"):
        config.validate()
        if len(train_samples) == 0:
            raise ValueError("training set is empty")
        self.config = config
        self.device = device
        self.samples = train_samples

        torch.manual_seed(config.seed)
        self.model = MomentHighlightModel(config).to(device)
        self.optimizer = torch.optim.AdamW(
            [p for p in self.model.parameters() if p.requires_grad],
            lr=config.lr,
            weight_decay=config.weight_decay,
        )
        self.order_rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.cursor = 0
        self.global_step = 0
        self.permutation = self.order_rng.permutation(len(train_samples))
        self.loss_log: list[float] = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.samples) / self.config.batch_size)

    def _next_batch(self) -> Batch:
        if self.cursor >= len(self.permutation):
            self.epoch += 1
            self.permutation = self.order_rng.permutation(len(self.samples))
            self.cursor = 0
        idxs = self.permutation[self.cursor : self.cursor + self.config.batch_size]
        self.cursor += len(idxs)
        return pad_batch([self.samples[i] for i in idxs])

    def step(self) -> dict[str, float]:
        """One optimizer step: forward, backward, clip, update, EMA, enqueue."""
        batch = self._next_batch()
        bt = batch_to_tensors(batch, self.device)
        self.model.train()
        try:
            total, parts, (G_mv, G_mt) = self.model.training_losses(bt)
        except FloatingPointError as e:
            raise NumericalError(f"step {self.global_step}: {e}") from e
        if not torch.isfinite(total):
            raise NumericalError(
                f"non-finite loss at step {self.global_step}: {parts}"
            )
        self.optimizer.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.model.momentum_update()
        self.model.align.push(G_mv, G_mt)
        self.global_step += 1
        self.loss_log.append(parts["total"])
        return parts

    def train_steps(self, n_steps: int, out_dir: str | Path | None = None) -> list[float]:
        losses = []
        for _ in range(n_steps):
            try:
                losses.append(self.step()["total"])
            except NumericalError:
                if out_dir is not None:
                    self.save_checkpoint(Path(out_dir) / "diagnostic.ckpt")
                raise
        return losses

    def train_epochs(
        self,
        n_epochs: int | None = None,
        val_samples: list[Sample] | None = None,
        out_dir: str | Path | None = None,
        log_fn=None,
    ) -> list[float]:
        """Run `n_epochs` more epochs, or up to the configured total when None.

        Epoch boundaries (logging, eval, periodic checkpoints) are derived
        from the step count, so a resumed run picks up mid-epoch and still
        hits the same boundaries as an uninterrupted one.
        """
        spe = self.steps_per_epoch
        if n_epochs is None:
            target = self.config.epochs * spe
        else:
            target = self.global_step + n_epochs * spe
        total_epochs = (target + spe - 1) // spe
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        losses = []
        while self.global_step < target:
            boundary = (self.global_step // spe + 1) * spe
            chunk = self.train_steps(min(boundary, target) - self.global_step, out_dir=out)
            losses.extend(chunk)
            if self.global_step % spe != 0:
                continue
            done = self.global_step // spe
            if log_fn is not None:
                log_fn(f"epoch {done}/{total_epochs} step {self.global_step} loss {np.mean(chunk):.4f}")
            if (
                val_samples is not None
                and self.config.eval_every > 0
                and done % self.config.eval_every == 0
            ):
                report = evaluate_model(self.model, val_samples, self.config.batch_size, self.device)
                if log_fn is not None:
                    log_fn(
                        f"  val R1@0.5 {report.r1_at[0.5]:.3f} "
                        f"mAP@0.5 {report.map_at[0.5]:.3f} HIT@1 {report.hit_at_1:.3f}"
                    )
            if (
                out is not None
                and self.config.checkpoint_every > 0
                and done % self.config.checkpoint_every == 0
            ):
                self.save_checkpoint(out / f"epoch{done:04d}.ckpt")
        if out is not None:
            self.save_checkpoint(out / "final.ckpt")
        return losses

    # -- checkpointing ------------------------------------------------------

    def state(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "cursor": self.cursor,
            "global_step": self.global_step,
            "permutation": self.permutation.copy(),
            "model": dict(self.model.state_dict()),
            "optimizer": self.optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": self.order_rng.bit_generator.state,
            "loss_log": list(self.loss_log),
        }

    def save_checkpoint(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            pickle.dump(_encode_state(self.state()), fh, protocol=4)

    def restore(self, state: dict) -> None:
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self.global_step = int(state["global_step"])
        self.permutation = np.asarray(state["permutation"]).copy()
        self.model.load_state_dict(_to_tensor(state["model"]))
        self.optimizer.load_state_dict(_to_tensor(state["optimizer"]))
        torch_rng = state["torch_rng"]
        if isinstance(torch_rng, np.ndarray):
            torch_rng = torch.from_numpy(torch_rng.copy())
        torch.set_rng_state(torch_rng.clone())
        self.order_rng.bit_generator.state = state["numpy_rng"]
        self.loss_log = list(state["loss_log"])

    @classmethod
    def from_checkpoint(
        cls, path: str | Path, train_samples: list[Sample], device: str = "cpu"
    ) -> "Trainer":
        state = load_checkpoint(path)
        config = RunConfig(**state["config"])
        trainer = cls(config, train_samples, device)
        trainer.restore(state)
        return trainer


def load_checkpoint(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _decode_state(pickle.load(fh))


def model_from_checkpoint(path: str | Path, device: str = "cpu") -> tuple[MomentHighlightModel, RunConfig]:
    state = load_checkpoint(path)
    config = RunConfig(**state["config"])
    config.validate()
    model = MomentHighlightModel(config).to(device)
    model.load_state_dict(_to_tensor(state["model"]))
    model.eval()
    return model, config


# -- evaluation / prediction drivers ----------------------------------------


def predict_dataset(
    model: MomentHighlightModel,
    samples: list[Sample],
    batch_size: int = 32,
    device: str = "cpu",
) -> dict[str, dict]:
    """id -> interchange prediction record, batched, in eval mode."""
    records: dict[str, dict] = {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        for rec in predict_records(model, pad_batch(chunk), device):
            records[rec["id"]] = rec
    return records


def evaluate_model(
    model: MomentHighlightModel,
    samples: list[Sample],
    batch_size: int = 32,
    device: str = "cpu",
    with_per_query: bool = False,
) -> EvalReport:
    preds = predict_dataset(model, samples, batch_size, device)
    return evaluate(samples, preds, with_per_query=with_per_query)


def save_per_loop_plot(sample: Sample, per_loop: np.ndarray, path: str | Path) -> None:
    """One image: the top-1 span after each decoder loop, with GT spans below."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_loops = per_loop.shape[0]
    fig, ax = plt.subplots(figsize=(8, 1.2 + 0.5 * (n_loops + 1)))
    for i, (c, w, p) in enumerate(per_loop):
        ax.barh(n_loops - i, w, left=c - w / 2, height=0.6, color="tab:blue", alpha=0.7)
        ax.text(min(c + w / 2 + 0.01, 0.98), n_loops - i, f"loop {i + 1} ({p:.2f})", va="center", fontsize=8)
    for m in sample.annotation.gt_moments:
        ax.barh(0, m.width, left=m.start, height=0.6, color="tab:green", alpha=0.7)
    ax.text(0.0, -0.55, "ground truth", fontsize=8)
    ax.set_xlim(0, 1)
    ax.set_ylim(-1, n_loops + 1)
    ax.set_yticks([])
    ax.set_xlabel("normalized time")
    ax.set_title(sample.id)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- ablation ----------------------------------------------------------------

ABLATION_AXES = {
    "alpha": ("alpha", float),
    "queue_len": ("queue_len", int),
    "conv_blocks": ("conv_blocks", int),
    "loops": ("n_loops", int),
    "fuser_placement": ("conv_placement", str),
}


def parse_axis_values(axis: str, raw: str) -> list:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    _, caster = ABLATION_AXES[axis]
    try:
        values = [caster(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse values {raw!r} for axis {axis!r}") from e
    if not values:
        raise ConfigError("ablation needs at least one value")
    if axis == "fuser_placement":
        for v in values:
            if v not in CONV_PLACEMENTS:
                raise ConfigError(f"fuser_placement value {v!r} not in {CONV_PLACEMENTS}")
    return values


def ablate(
    config: RunConfig,
    axis: str,
    values: list,
    train_samples: list[Sample],
    val_samples: list[Sample],
    device: str = "cpu",
    log_fn=None,
) -> dict:
    """Train one model per value; emit a machine-readable comparison table."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    field, _ = ABLATION_AXES[axis]
    rows = []
    for value in values:
        cfg = replace(config, **{field: value})
        cfg.validate()
        if log_fn is not None:
            log_fn(f"[ablate] {axis}={value}: training {cfg.epochs} epochs")
        trainer = Trainer(cfg, train_samples, device)
        trainer.train_epochs(log_fn=log_fn)
        report = evaluate_model(trainer.model, val_samples, cfg.batch_size, device)
        n_params = sum(p.numel() for p in trainer.model.parameters() if p.requires_grad)
        rows.append(
            {
                "value": value,
                "param_count": int(n_params),
                "final_train_loss": trainer.loss_log[-1] if trainer.loss_log else None,
                "report": {
                    "r1_at": {f"{k:g}": v for k, v in report.r1_at.items()},
                    "map_at": {f"{k:g}": v for k, v in report.map_at.items()},
                    "map_avg": report.map_avg,
                    "miou": report.miou,
                    "hd_map": report.hd_map,
                    "hit_at_1": report.hit_at_1,
                },
            }
        )
    return {"axis": axis, "values": list(values), "rows": rows}
