"""Deterministic masked-diffusion training loop.

All randomness is derived from the run seed and counters, never from
global state threaded through the loop:

* epoch order     ``default_rng([seed, 1, epoch])``
* per-sequence t and mask  ``default_rng([seed, 2, epoch, segment_index])``
* evaluation masks ``default_rng([seed, 3, segment_index])``
* parameter init  ``torch.manual_seed(seed)``

so resuming from a checkpoint only needs the model, optimiser and step.

Training reads a stream of segments made of one shuffled permutation per
epoch laid end to end; step ``k`` takes stream items ``[kB, (k+1)B)``. A
batch may therefore straddle an epoch boundary, and a batch larger than the
corpus simply holds several epochs' worth of independently masked copies.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .config import RunConfig
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .masking import (
    FrequencyTable,
    apply_mask,
    build_frequency_table,
    curriculum_power,
    sequence_mask_probs,
    table_from_counts,
)
from .model import TimeConditionedEncoder
from .objective import masked_cross_entropy, nelbo_loss, nelbo_weight
from .tokenizer import CLS_ID, PAD_ID, SEP_ID, Vocab, train_bpe

log = logging.getLogger(__name__)

_EPOCH_STREAM, _MASK_STREAM, _EVAL_STREAM = 1, 2, 3
CHECKPOINT_MAGIC = b"MASKDIFF-CKPT\n"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = (
    "step", "epoch", "tau", "lr", "mask_power", "t", "weight",
    "masked_count", "raw_ce", "weighted_loss",
)
NON_MASKABLE = (PAD_ID, CLS_ID, SEP_ID)


# -- data ------------------------------------------------------------------

def read_documents(path: str | Path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None
    docs = [line for line in text.splitlines() if line.strip()]
    if not docs:
        raise DataError(f"corpus {path} has no documents")
    return docs


def split_segments(documents: Sequence[Sequence[int]], seq_len: int) -> list[np.ndarray]:
    """Cut each document into independent ``seq_len`` pieces; no packing."""
    segments = []
    for doc in documents:
        doc = np.asarray(doc, dtype=np.int64)
        for start in range(0, len(doc), seq_len):
            segments.append(doc[start:start + seq_len])
    return segments


def pad_batch(segments: Sequence[np.ndarray], seq_len: int, pad_id: int = PAD_ID) -> np.ndarray:
    out = np.full((len(segments), seq_len), pad_id, dtype=np.int64)
    for i, seg in enumerate(segments):
        out[i, : len(seg)] = seg
    return out


def epoch_order(n_segments: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, _EPOCH_STREAM, epoch]).permutation(n_segments)


def make_batches(
    documents: Sequence[Sequence[int]], seq_len: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """One shuffled epoch of PAD-filled ``(batch, seq_len)`` arrays."""
    segments = split_segments(documents, seq_len)
    if not segments:
        raise DataError("corpus is empty")
    order = rng.permutation(len(segments))
    for start in range(0, len(order), batch_size):
        yield pad_batch([segments[i] for i in order[start:start + batch_size]], seq_len)


# -- checkpoint container -----------------------------------------------------

def write_checkpoint(path: str | Path, payload: dict) -> None:
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = {"version": CHECKPOINT_VERSION, "sha256": hashlib.sha256(body).hexdigest(), "size": len(body)}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(body)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    line, _, body = rest.partition(b"\n")
    try:
        header = json.loads(line)
    except ValueError:
        raise CheckpointError(f"{path}: unreadable header") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if len(body) != header.get("size") or hashlib.sha256(body).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: integrity check failed (hash mismatch)")
    return torch.load(io.BytesIO(body), weights_only=True)


def load_model(path: str | Path) -> tuple[TimeConditionedEncoder, Vocab, RunConfig]:
    """Rebuild a trained model (eval mode) with its vocabulary and config."""
    payload = read_checkpoint(path)
    cfg = RunConfig(**payload["config"])
    vocab = Vocab.from_text(payload["vocab"])
    model = TimeConditionedEncoder(cfg.model_config(len(vocab)), pad_id=PAD_ID)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, vocab, cfg


# -- training -----------------------------------------------------------------

@dataclass
class PreparedBatch:
    step: int
    epoch: int
    tau: float
    mask_power: float
    original: torch.Tensor
    corrupted: torch.Tensor
    mask: torch.Tensor
    t: torch.Tensor
    weights: torch.Tensor
    lengths: torch.Tensor


class Trainer:
    def __init__(
        self,
        cfg: RunConfig,
        vocab: Vocab,
        documents: Sequence[Sequence[int]],
        freq_table: FrequencyTable | None = None,
        out_dir: str | Path | None = None,
    ):
        if cfg.seed is None:
            raise ConfigError("seed: required")
        self.cfg = cfg
        self.vocab = vocab
        self.freq_table = freq_table
        self.segments = split_segments(documents, cfg.seq_len)
        if not self.segments:
            raise DataError("corpus produced no segments")
        self.schedule = cfg.schedule_obj()
        self.total_steps = cfg.max_steps or math.ceil(cfg.epochs * len(self.segments) / cfg.batch_size)
        self.out_dir = Path(out_dir) if out_dir is not None else None

        if cfg.freq_masking:
            if freq_table is None:
                raise ConfigError("freq_masking is on but no frequency table was given")
            self.weight_lookup = freq_table.weight_array(len(vocab))
        else:
            self.weight_lookup = None

        torch.manual_seed(cfg.seed)
        self.model = TimeConditionedEncoder(cfg.model_config(len(vocab)), pad_id=PAD_ID)
        decay = [p for p in self.model.parameters() if p.ndim >= 2]
        no_decay = [p for p in self.model.parameters() if p.ndim < 2]
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": cfg.weight_decay},
             {"params": no_decay, "weight_decay": 0.0}],
            lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8,
        )
        self.step = 0
        self.eval_history: list[dict] = []

    # schedule of training progress, learning rate and masking power -----------
    def tau_at(self, step: int) -> float:
        """Progress in [0, 1]: 0 on the first step, exactly 1 on the last."""
        if self.total_steps <= 1:
            return 0.0
        return min(step / (self.total_steps - 1), 1.0)

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        warm = max(1, round(cfg.warmup_frac * self.total_steps))
        if step < warm:
            return cfg.lr * (step + 1) / warm
        progress = min((step - warm) / max(1, self.total_steps - warm - 1), 1.0)
        return cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * progress)))

    def mask_power_at(self, step: int) -> float:
        return curriculum_power(self.tau_at(step), self.cfg.mask_power_max) if self.cfg.freq_masking else 0.0

    # batch preparation (pure function of step) ----------------------------------
    def batch_indices(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Epoch and segment index of every item in the batch for ``step``."""
        n, size = len(self.segments), self.cfg.batch_size
        epochs, positions = np.divmod(np.arange(step * size, (step + 1) * size), n)
        orders = {int(e): epoch_order(n, self.cfg.seed, int(e)) for e in np.unique(epochs)}
        idx = np.array([orders[int(e)][p] for e, p in zip(epochs, positions)])
        return epochs, idx

    def prepare(self, step: int) -> PreparedBatch:
        cfg = self.cfg
        epochs, idx = self.batch_indices(step)
        tau = self.tau_at(step)
        power = self.mask_power_at(step)
        segs = [self.segments[i] for i in idx]
        width = max(len(s) for s in segs)
        original = pad_batch(segs, width)
        corrupted = original.copy()
        mask = np.zeros_like(original, dtype=bool)
        ts, weights, lengths = [], [], []
        for row, (epoch, seg_index) in enumerate(zip(epochs, idx)):
            rng = np.random.default_rng([cfg.seed, _MASK_STREAM, int(epoch), int(seg_index)])
            sample = self.schedule.sample_time(rng, tau)
            maskable = ~np.isin(original[row], NON_MASKABLE)
            plan = sequence_mask_probs(self.weight_lookup, original[row], maskable, power, sample.masking_rate)
            out = apply_mask(plan, original[row], rng, self.vocab.mask_id)
            corrupted[row], mask[row] = out.tokens, out.mask_indicator
            ts.append(sample.t)
            weights.append(nelbo_weight(self.schedule, sample.t, tau, cfg.derivative_power, cfg.rate_factor))
            lengths.append(int((original[row] != PAD_ID).sum()))
        return PreparedBatch(
            step=step, epoch=int(epochs[0]), tau=tau, mask_power=power,
            original=torch.from_numpy(original), corrupted=torch.from_numpy(corrupted),
            mask=torch.from_numpy(mask), t=torch.tensor(ts, dtype=torch.float32),
            weights=torch.tensor(weights, dtype=torch.float64),
            lengths=torch.tensor(lengths, dtype=torch.float64),
        )

    # optimisation ------------------------------------------------------------------
    def train_step(self) -> dict:
        batch = self.prepare(self.step)
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        logits = self.model(batch.corrupted, batch.t)
        ce_sum, count = masked_cross_entropy(logits, batch.original, batch.mask)
        loss = nelbo_loss(batch.weights.to(ce_sum.dtype), ce_sum, batch.lengths.to(ce_sum.dtype))
        if not torch.isfinite(loss):
            self._dump_diagnostics(batch, ce_sum, count, lr)
            raise NumericError(f"non-finite loss at step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()

        masked = int(count.sum())
        ce_total = float(ce_sum.detach().sum())
        row = {
            "step": self.step,
            "epoch": batch.epoch,
            "tau": batch.tau,
            "lr": lr,
            "mask_power": batch.mask_power,
            "t": float(batch.t.double().mean()),
            "weight": float(batch.weights.mean()),
            "masked_count": masked,
            "raw_ce": ce_total / masked if masked else 0.0,
            "weighted_loss": float(loss.detach()),
        }
        self.step += 1
        return row

    def _dump_diagnostics(self, batch, ce_sum, count, lr):
        if self.out_dir is None:
            return
        info = {
            "step": self.step, "lr": lr, "tau": batch.tau,
            "t": batch.t.tolist(), "weights": batch.weights.tolist(),
            "ce_sums": ce_sum.detach().tolist(), "masked_counts": count.tolist(),
        }
        (self.out_dir / f"diagnostics_step{self.step}.json").write_text(json.dumps(info, indent=2))

    # evaluation ----------------------------------------------------------------------
    @torch.no_grad()
    def masked_ce_probe(self) -> float:
        """Raw masked CE per token over the whole corpus at a fixed masking rate."""
        rate = self.cfg.eval_mask_rate
        tau = self.tau_at(self.step)
        t = float(self.schedule.time_for_rate(rate, tau))
        self.model.eval()
        total, n = 0.0, 0
        bs = self.cfg.batch_size
        for start in range(0, len(self.segments), bs):
            segs = self.segments[start:start + bs]
            original = pad_batch(segs, max(len(s) for s in segs))
            corrupted = original.copy()
            mask = np.zeros_like(original, dtype=bool)
            for row in range(len(segs)):
                rng = np.random.default_rng([self.cfg.seed, _EVAL_STREAM, start + row])
                maskable = ~np.isin(original[row], NON_MASKABLE)
                hit = (rng.random(maskable.shape) < rate) & maskable
                if not hit.any():
                    # always probe at least one position per segment
                    hit[rng.choice(np.flatnonzero(maskable))] = True
                corrupted[row][hit] = self.vocab.mask_id
                mask[row] = hit
            logits = self.model(torch.from_numpy(corrupted), torch.full((len(segs),), t))
            ce_sum, count = masked_cross_entropy(logits, torch.from_numpy(original), torch.from_numpy(mask))
            total += float(ce_sum.sum())
            n += int(count.sum())
        return total / n

    def evaluate(self) -> dict:
        from .eval import minimal_pair_accuracy

        result = {"step": self.step, "masked_ce": self.masked_ce_probe()}
        if self.cfg.eval_pairs:
            report = self.out_dir / f"pairs_step{self.step}.csv" if self.out_dir else None
            result["pair_accuracy"] = minimal_pair_accuracy(
                self.cfg.eval_pairs, self.model, self.vocab, self.cfg.eval_conditioning,
                schedule=self.schedule, tau=self.tau_at(max(self.step - 1, 0)), report_path=report,
            )
        self.eval_history.append(result)
        return result

    # checkpointing ----------------------------------------------------------------------
    def state_payload(self) -> dict:
        counts = None
        if self.freq_table is not None:
            counts = [[int(k), int(v)] for k, v in sorted(self.freq_table.counts.items())]
        return {
            "config": self.cfg.to_dict(),
            "vocab": self.vocab.to_text(),
            "freq_counts": counts,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path: str | Path) -> None:
        write_checkpoint(path, self.state_payload())

    @classmethod
    def resume(
        cls,
        path: str | Path,
        documents: Sequence[Sequence[int]] | None = None,
        out_dir: str | Path | None = None,
    ) -> "Trainer":
        payload = read_checkpoint(path)
        cfg = RunConfig(**payload["config"])
        vocab = Vocab.from_text(payload["vocab"])
        table = None
        if payload["freq_counts"] is not None:
            table = table_from_counts({k: v for k, v in payload["freq_counts"]}, cfg.weight_eps)
        if documents is None:
            documents = [vocab.encode(d) for d in read_documents(cfg.corpus)]
        trainer = cls(cfg, vocab, documents, table, out_dir=out_dir)
        trainer.model.load_state_dict(payload["model"])
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.step = int(payload["step"])
        torch.set_rng_state(payload["torch_rng"])
        return trainer

    # driver --------------------------------------------------------------------------------
    def run(self, until: int | None = None) -> list[dict]:
        """Train up to step ``until`` (default: the end), logging every step."""
        until = self.total_steps if until is None else min(until, self.total_steps)
        rows = []
        log_fh = writer = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / "train_log.csv"
            fresh = self.step == 0 or not log_path.exists()
            log_fh = open(log_path, "w" if fresh else "a", newline="")
            writer = csv.DictWriter(log_fh, fieldnames=LOG_COLUMNS)
            if fresh:
                writer.writeheader()
        try:
            while self.step < until:
                row = self.train_step()
                rows.append(row)
                if writer is not None:
                    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
                    log_fh.flush()
                done = self.step
                if self.cfg.eval_every and done % self.cfg.eval_every == 0 and done < self.total_steps:
                    self._log_eval(self.evaluate())
                if self.cfg.checkpoint_every and done % self.cfg.checkpoint_every == 0 and self.out_dir:
                    self.save(self.out_dir / f"checkpoint_step{done}.pt")
        finally:
            if log_fh is not None:
                log_fh.close()
        if self.step >= self.total_steps and until == self.total_steps:
            self._log_eval(self.evaluate())
            if self.out_dir is not None:
                self.save(self.out_dir / "checkpoint.pt")
        return rows

    def _log_eval(self, result: dict) -> None:
        log.info("eval %s", result)
        if self.out_dir is None:
            return
        path = self.out_dir / "eval_log.csv"
        fresh = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "masked_ce", "pair_accuracy"])
            if fresh:
                writer.writeheader()
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in result.items()})


def build_trainer(cfg: RunConfig) -> Trainer:
    """Resolve paths, build or load the tokenizer and frequency table."""
    if cfg.seed is None:
        raise ConfigError("seed: required (no entropy default)")
    if not cfg.corpus or not Path(cfg.corpus).is_file():
        raise ConfigError(f"corpus: path {cfg.corpus!r} does not exist")
    for key in ("vocab", "freq_table", "eval_pairs"):
        value = getattr(cfg, key)
        if value and not Path(value).is_file():
            raise ConfigError(f"{key}: path {value!r} does not exist")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.txt").write_text(cfg.to_text(), encoding="utf-8")

    texts = read_documents(cfg.corpus)
    if cfg.vocab:
        vocab = Vocab.load(cfg.vocab)
    else:
        vocab = train_bpe(texts, cfg.vocab_size)
        vocab.save(out_dir / "vocab.txt")
    documents = [vocab.encode(text) for text in texts]

    table = None
    if cfg.freq_masking:
        if cfg.freq_table:
            table = FrequencyTable.load(cfg.freq_table, cfg.weight_eps)
        else:
            table = build_frequency_table(
                (tok for doc in documents for tok in doc), exclude=vocab.special_ids,
                weight_eps=cfg.weight_eps,
            )
            table.save(out_dir / "freq_table.tsv")
    return Trainer(cfg, vocab, documents, table, out_dir=out_dir)
