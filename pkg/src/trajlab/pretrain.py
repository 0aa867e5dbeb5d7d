"""Pre-training loop: window streams, objective application, optimization,
checkpointing with bitwise resume, token-budget equalization.

Windows from all environments in a dataset are shuffled together per epoch
(sampling without replacement, reshuffled each epoch), so multi-domain
batches interleave environments uniformly at random. Token budgets are
counted in window tokens (windows consumed x context length) and can be
equalized exactly across runs for fair comparisons.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datagen import Dataset
from .envs import builtin_roster
from .model import ModelConfig, init_weights, save_model
from .numcore import AdamState, Tensor, adam_step, zero_grads
from .objectives import SmartSchedule, loss, make_batch
from .tokenizer import (
    ComponentTokenizer,
    ModalityTokenizer,
    QuantizerConfig,
    TokenSequence,
    Vocabulary,
    component_vocab,
    full_window_timesteps,
    max_modality_bins,
    window_ending_at,
)


class NumericError(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint is retained."""


N_ENV_TOKENS = len(builtin_roster())


def build_tokenizers(dataset: Dataset, config: QuantizerConfig, level: str = "component"):
    """Per-env tokenizers plus the shared vocabulary for ``level``."""
    specs = {env_id: dataset.spec(env_id) for env_id in dataset.manifest.env_specs}
    if level == "component":
        vocab = component_vocab(config.n_bins, N_ENV_TOKENS)
        toks = {
            env_id: ComponentTokenizer(spec, dataset.manifest.stats[env_id], config, vocab)
            for env_id, spec in specs.items()
        }
        return toks, vocab
    if level == "modality":
        toks = {}
        for env_id, spec in specs.items():
            obs_bins = min(9, max_modality_bins(spec.obs_dim))
            act_bins = min(9, max_modality_bins(spec.act_dim))
            toks[env_id] = ModalityTokenizer(
                spec, dataset.manifest.stats[env_id], config,
                obs_bins=obs_bins, act_bins=act_bins,
            )
        value_count = max(t.value_count for t in toks.values())
        vocab = Vocabulary(value_count=value_count, n_envs=N_ENV_TOKENS)
        return toks, vocab
    raise ValueError(f"unknown tokenization level '{level}'")


class WindowBank:
    """Pre-tokenized windows for a dataset: one materialized row per window.

    Rows carry tokens/kinds/timesteps/components so masking generators can
    reconstruct per-window block structure; ``meta`` maps each row to
    (trajectory index, timestep, env_id, padded).
    """

    def __init__(self, dataset: Dataset, config: QuantizerConfig, level: str = "component",
                 include_padded: bool = False):
        self.config = config
        self.level = level
        self.tokenizers, self.vocab = build_tokenizers(dataset, config, level)
        tokens_rows = []
        kind_rows = []
        step_rows = []
        comp_rows = []
        meta = []
        self.streams = []
        for ti, traj in enumerate(dataset.trajectories):
            tok = self.tokenizers[traj.env_id]
            stream = tok.encode_trajectory(traj)
            self.streams.append(stream)
            ts = full_window_timesteps(stream, config)
            if include_padded:
                ts = np.arange(0, stream.length, config.stride_blocks, dtype=np.int64)
            elif ts.size == 0:
                ts = np.array([stream.length - 1], dtype=np.int64)
            for t in ts:
                win = window_ending_at(stream, int(t), self.vocab, config)
                tokens_rows.append(win.tokens)
                kind_rows.append(win.kinds)
                step_rows.append(win.timesteps)
                comp_rows.append(win.components)
                meta.append((ti, int(t), traj.env_id, win.padded))
        self.tokens = np.stack(tokens_rows)
        self.kinds = np.stack(kind_rows)
        self.timesteps = np.stack(step_rows)
        self.components = np.stack(comp_rows)
        self.meta = meta
        self.k_tok = {env_id: t.k_tok for env_id, t in self.tokenizers.items()}
        self.l_tok = {env_id: t.l_tok for env_id, t in self.tokenizers.items()}

    def __len__(self):
        return self.tokens.shape[0]

    def window(self, i: int) -> TokenSequence:
        ti, t, env_id, padded = self.meta[i]
        return TokenSequence(
            tokens=self.tokens[i], kinds=self.kinds[i], timesteps=self.timesteps[i],
            components=self.components[i], env_id=env_id,
            k_tok=self.k_tok[env_id], l_tok=self.l_tok[env_id], padded=padded,
        )

    def windows(self, idx) -> list[TokenSequence]:
        return [self.window(int(i)) for i in idx]

    def env_ids(self) -> np.ndarray:
        return np.array([m[2] for m in self.meta])


@dataclass
class PretrainRun:
    dataset: Dataset
    objective: str
    model_config: ModelConfig
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    level: str = "component"
    epochs: int = 3
    batch_size: int = 64
    lr: float = 3e-4
    seed: int = 0
    checkpoint_every: int = 0  # steps between checkpoints; 0 = final only
    max_windows: int | None = None  # exact window budget (epochs still cap)
    schedule: SmartSchedule = field(default_factory=SmartSchedule)

    def budget_windows(self, bank_size: int) -> int:
        cap = bank_size * self.epochs
        if self.max_windows is None:
            return cap
        if self.max_windows > cap:
            raise ValueError(
                f"budget {self.max_windows} windows exceeds {self.epochs} epochs over "
                f"{bank_size} windows"
            )
        return self.max_windows

    def total_steps(self, bank_size: int) -> int:
        w = self.budget_windows(bank_size)
        return int(np.ceil(w / self.batch_size))


def equalize_budget(runs: list[PretrainRun], banks: list[WindowBank],
                    budget: int | None = None) -> list[PretrainRun]:
    """Pin every run to the same window budget (exact, not approximate)."""
    if len(runs) != len(banks):
        raise ValueError("one bank per run required")
    caps = [len(b) * r.epochs for r, b in zip(runs, banks)]
    target = min(caps) if budget is None else budget
    bad = [i for i, c in enumerate(caps) if c < target]
    if bad:
        raise ValueError(f"budget {target} windows impossible for runs {bad} (epoch cap)")
    return [replace(r, max_windows=target) for r in runs]


def tokens_consumed(run: PretrainRun, bank_size: int) -> int:
    return run.budget_windows(bank_size) * run.quantizer.context_window


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0x5F5F, epoch])
    return rng.permutation(n)


def pretrain(
    run: PretrainRun,
    out_path,
    log_path=None,
    bank: WindowBank | None = None,
    config_digest: str = "",
    resume_from=None,
):
    """Train a trunk under ``run``; returns (weights, train_log list).

    Deterministic given the seed. With ``resume_from`` (a checkpoint written
    by this function) training continues bitwise-identically to an
    uninterrupted run.
    """
    bank = bank or WindowBank(run.dataset, run.quantizer, run.level)
    n_windows = len(bank)
    if n_windows == 0:
        raise ValueError("dataset yields no windows")
    budget = run.budget_windows(n_windows)
    total_steps = run.total_steps(n_windows)
    vocab = bank.vocab

    if resume_from is not None:
        blobs, meta, _ = nc.load_checkpoint(resume_from)
        weights = {k[2:]: Tensor(v, requires_grad=True) for k, v in blobs.items() if k.startswith("w:")}
        adam = AdamState(lr=run.lr)
        adam.step = int(meta["train_state"]["adam_step"])
        adam.m = {k[2:]: v.copy() for k, v in blobs.items() if k.startswith("m:")}
        adam.v = {k[2:]: v.copy() for k, v in blobs.items() if k.startswith("v:")}
        mask_rng = np.random.default_rng(0)
        mask_rng.bit_generator.state = json.loads(meta["train_state"]["mask_rng"])
        consumed = int(meta["train_state"]["windows_consumed"])
        step = int(meta["train_state"]["step"])
    else:
        weights = init_weights(run.model_config, run.seed)
        adam = AdamState(lr=run.lr)
        mask_rng = np.random.default_rng([int(run.seed), 0x6D61])
        consumed = 0
        step = 0

    train_log = []
    log_file = open(log_path, "a" if resume_from is not None else "w") if log_path else None

    def write_checkpoint(path):
        blobs = {f"w:{k}": t.data for k, t in weights.items()}
        adam.ensure(weights)
        blobs.update({f"m:{k}": v for k, v in adam.m.items()})
        blobs.update({f"v:{k}": v for k, v in adam.v.items()})
        ckpt_meta = {
            "model_config": run.model_config.to_dict(),
            "objective": run.objective,
            "tokenizer": {
                "level": run.level,
                "config": run.quantizer.to_dict(),
                "per_env": {str(k): t.meta() for k, t in bank.tokenizers.items()},
                "vocab": {"value_count": vocab.value_count, "n_envs": vocab.n_envs},
            },
            "schedule": run.schedule.to_dict(),
            "train_state": {
                "step": step,
                "adam_step": adam.step,
                "windows_consumed": consumed,
                "mask_rng": json.dumps(mask_rng.bit_generator.state),
                "seed": run.seed,
            },
        }
        nc.save_checkpoint(path, blobs, ckpt_meta, config_digest)

    try:
        while consumed < budget:
            epoch = consumed // n_windows
            order = _epoch_order(run.seed, epoch, n_windows)
            pos = consumed - epoch * n_windows
            while pos < n_windows and consumed < budget:
                take = min(run.batch_size, n_windows - pos, budget - consumed)
                idx = order[pos : pos + take]
                wins = bank.windows(idx)
                t0 = time.perf_counter()
                views = make_batch(
                    run.objective, wins, vocab, mask_rng,
                    schedule=run.schedule, step=step, total_steps=total_steps,
                )
                total = None
                for view in views:
                    part = loss(weights, run.model_config, view)
                    total = part if total is None else nc.add(total, part)
                loss_val = float(total.data)
                if not np.isfinite(loss_val):
                    raise NumericError(f"non-finite loss at step {step}")
                total.backward()
                adam_step(weights, None, adam)
                zero_grads(weights)
                pos += take
                consumed += take
                step += 1
                rec = {
                    "step": step,
                    "loss": loss_val,
                    "tokens": consumed * run.quantizer.context_window,
                    "time": time.perf_counter() - t0,
                }
                train_log.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                if run.checkpoint_every and step % run.checkpoint_every == 0:
                    write_checkpoint(out_path)
        write_checkpoint(out_path)
    finally:
        if log_file:
            log_file.close()
    return weights, train_log
