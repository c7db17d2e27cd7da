"""Two-stage training: multimodal graphs with a frozen encoder, then linguistic
graphs with everything trainable, plus the single-stage and ablation modes."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch

from .backbone import Vocab, tokenize
from .bleu import corpus_bleu
from .checkpoint import Checkpoint, CheckpointError, build_model, from_model, tensors_identical
from .embeddings import EmbeddedGraph, embed_graph, make_provider
from .io import atomic_write_text
from .model import GraphTranslator, ModelConfig, collate_tokens
from .scene_graph import LinguisticSceneGraph, MultimodalSceneGraph, SuperGraph

logger = logging.getLogger(__name__)

STAGES = ("one", "two", "one-multimodal")
STAGE_DEFAULT_LR = {"one": 2e-5, "two": 1e-5, "one-multimodal": 2e-5}
CONFIG_FILE_KEYS = (
    "stage", "lr", "lr_end", "power", "batch_size", "patience", "max_epochs", "seed",
    "no_gate", "skip_stage1", "unfreeze_encoder", "dim", "layers", "heads", "provider",
)


class StageMismatchError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ParallelExample:
    graph: SuperGraph
    source: list[str]
    target: list[str]

    @classmethod
    def from_text(cls, graph: SuperGraph, source: str, target: str) -> "ParallelExample":
        return cls(graph, tokenize(source), tokenize(target))


@dataclass
class TrainConfig:
    stage: str = "one"
    lr: float | None = None
    lr_end: float = 0.0
    power: float = 1.0
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 50
    seed: int = 0
    no_gate: bool = False
    skip_stage1: bool = False
    unfreeze_encoder: bool = False
    dim: int = 16
    layers: int = 2
    heads: int = 2
    provider: str = "stub"
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    freeze_adapter_stage2: bool = False
    max_steps: int | None = None
    max_len: int | None = None
    smoothing: str = "add_one"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr is None:
            self.lr = STAGE_DEFAULT_LR[self.stage]
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            layers=self.layers,
            heads=self.heads,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            dropout=self.dropout,
            no_gate=self.no_gate,
        )


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool) or name in ("no_gate", "skip_stage1", "unfreeze_encoder"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if name in ("batch_size", "patience", "max_epochs", "seed", "dim", "layers", "heads"):
        return int(raw)
    if name in ("lr", "lr_end", "power"):
        return float(raw)
    return raw


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse the flat ``key=value`` config format (``#`` starts a comment)."""
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_FILE_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), **overrides)


# ---------------------------------------------------------------------------
# optimization


def poly_lr(step: int, lr0: float, lr_end: float, total: int, power: float = 1.0) -> float:
    frac = min(step, total) / total if total > 0 else 1.0
    return (lr0 - lr_end) * (1.0 - frac) ** power + lr_end


class PolyDecayAdamW:
    """AdamW with a polynomial-decay learning rate, over trainable tensors only."""

    def __init__(self, named_params, lr, total_steps, lr_end=0.0, power=1.0,
                 weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr0, self.lr_end, self.power, self.total = lr, lr_end, power, total_steps
        self.step_count = 0
        params = [p for _, p in self.named]
        self.optim = torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay) if params else None

    @property
    def lr(self) -> float:
        return poly_lr(self.step_count, self.lr0, self.lr_end, self.total, self.power)

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        for name, p in self.named:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise NonFiniteError(f"non-finite gradient in {name}")
        lr = self.lr
        if self.optim is not None:
            for group in self.optim.param_groups:
                group["lr"] = lr
            self.optim.step()
        self.step_count += 1
        return lr

    def zero_grad(self):
        if self.optim is not None:
            self.optim.zero_grad(set_to_none=True)


class EarlyStopping:
    """Stop once the score has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if score > self.best_score:
            self.best_score, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# data


@dataclass
class PreparedData:
    src: list[list[int]]
    tgt: list[list[int]]
    graphs: list[EmbeddedGraph]
    refs: list[list[str]]

    def __len__(self):
        return len(self.src)


def prepare(examples: Sequence[ParallelExample], vocab: Vocab, provider) -> PreparedData:
    return PreparedData(
        src=[vocab.encode(ex.source) for ex in examples],
        tgt=[vocab.encode(ex.target) for ex in examples],
        graphs=[embed_graph(ex.graph, provider) for ex in examples],
        refs=[list(ex.target) for ex in examples],
    )


def make_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Sort by length into contiguous buckets, then shuffle bucket order."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    buckets = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [buckets[i] for i in rng.permutation(len(buckets))]


def check_stage(examples: Sequence[ParallelExample], stage: str) -> None:
    want = LinguisticSceneGraph if stage == "two" else MultimodalSceneGraph
    for i, ex in enumerate(examples):
        if not isinstance(ex.graph, want):
            raise StageMismatchError(f"graph/stage mismatch: example {i} holds a {type(ex.graph).__name__} in stage {stage!r}")


@torch.no_grad()
def evaluate_loss(model: GraphTranslator, data: PreparedData, batch_size: int = 64) -> float:
    """Mean token-level cross-entropy (dropout off)."""
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        tgt = collate_tokens([data.tgt[i] for i in idx])
        n = int((tgt != 0).sum())
        loss = model.loss(collate_tokens([data.src[i] for i in idx]), [data.graphs[i] for i in idx], tgt)
        total += float(loss) * n
        count += n
    return total / count


def greedy_translate(model: GraphTranslator, data: PreparedData, max_len: int, batch_size: int = 64) -> list[list[str]]:
    out = []
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        hyps = model.greedy([data.src[i] for i in idx], [data.graphs[i] for i in idx], max_len)
        out.extend(model.vocab.decode(h.tokens) for h in hyps)
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: GraphTranslator
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    steps: int = 0


def _write_metrics(path, metrics):
    atomic_write_text(path, "".join(json.dumps(m) + "\n" for m in metrics))


def _fit(model, train, valid, config: TrainConfig, stage: str, checkpoint_path=None, metrics_path=None) -> TrainResult:
    provider = make_provider(config.provider, model.config.dim)
    train_data = prepare(train, model.vocab, provider)
    valid_data = prepare(valid, model.vocab, provider) if valid else train_data
    max_len = config.max_len or max(len(t) for t in valid_data.tgt) + 2

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    n_batches = math.ceil(len(train_data) / config.batch_size)
    total = config.max_epochs * n_batches
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    opt = PolyDecayAdamW(
        model.named_parameters(), config.lr, total, config.lr_end, config.power,
        config.weight_decay, config.betas, config.eps,
    )
    stopper = EarlyStopping(config.patience)
    metrics = []
    best_state = None
    lengths = [len(s) for s in train_data.src]

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        losses = []
        lr = opt.lr
        for batch in make_batches(lengths, config.batch_size, rng):
            if config.max_steps is not None and opt.step_count >= config.max_steps:
                break
            loss = model.loss(
                collate_tokens([train_data.src[i] for i in batch]),
                [train_data.graphs[i] for i in batch],
                collate_tokens([train_data.tgt[i] for i in batch]),
            )
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            lr = opt.step()
            losses.append(float(loss.detach()))
        if not losses:
            break
        hyps = greedy_translate(model, valid_data, max_len)
        bleu = corpus_bleu(hyps, valid_data.refs, smoothing=config.smoothing).bleu
        metrics.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_bleu": bleu, "lr": lr})
        logger.info("stage %s epoch %d loss %.4f bleu %.2f", stage, epoch, metrics[-1]["train_loss"], bleu)
        improved, stop = stopper.update(epoch, bleu)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    ckpt = from_model(model, stage=stage, best_epoch=stopper.best_epoch, provider=config.provider)
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
    if metrics_path is not None:
        _write_metrics(metrics_path, metrics)
    return TrainResult(model, ckpt, metrics, stopper.best_epoch, opt.step_count)


def _vocab_for(examples: Sequence[ParallelExample]) -> Vocab:
    return Vocab.build([ex.source for ex in examples] + [ex.target for ex in examples])


def _new_model(vocab: Vocab, config: TrainConfig) -> GraphTranslator:
    torch.manual_seed(config.seed)
    return GraphTranslator(vocab, config.model_config())


def train_stage1(train, valid, config: TrainConfig, vocab: Vocab | None = None,
                 checkpoint_path=None, metrics_path=None) -> TrainResult:
    """Multimodal graphs; encoder group frozen unless ``unfreeze_encoder``."""
    check_stage(train, "one")
    check_stage(valid or [], "one")
    model = _new_model(vocab or _vocab_for(list(train) + list(valid or [])), config)
    model.set_frozen([] if config.unfreeze_encoder else ["encoder"])
    return _fit(model, train, valid, config, "one", checkpoint_path, metrics_path)


def train_stage2(train, valid, config: TrainConfig, stage1_checkpoint=None, vocab: Vocab | None = None,
                 checkpoint_path=None, metrics_path=None) -> TrainResult:
    """Linguistic graphs, encoder unfrozen, continuing from the stage-1 adapter.

    With ``skip_stage1`` the model starts fresh instead.
    """
    check_stage(train, "two")
    check_stage(valid or [], "two")
    if config.skip_stage1:
        model = _new_model(vocab or _vocab_for(list(train) + list(valid or [])), config)
    else:
        if stage1_checkpoint is None:
            raise CheckpointError("stage 2 needs a stage-1 checkpoint (or skip_stage1)")
        ckpt = stage1_checkpoint if isinstance(stage1_checkpoint, Checkpoint) else Checkpoint.load(stage1_checkpoint)
        model = build_model(ckpt)
        differ = tensors_identical(model, ckpt, "adapter")
        if differ:
            raise CheckpointError(f"adapter tensors differ from the stage-1 checkpoint: {differ}")
    model.set_frozen(["adapter"] if config.freeze_adapter_stage2 else [])
    return _fit(model, train, valid, config, "two", checkpoint_path, metrics_path)


def train_one_stage_multimodal(train, valid, config: TrainConfig, vocab: Vocab | None = None,
                               checkpoint_path=None, metrics_path=None) -> TrainResult:
    check_stage(train, "one")
    check_stage(valid or [], "one")
    model = _new_model(vocab or _vocab_for(list(train) + list(valid or [])), config)
    model.set_frozen([])
    return _fit(model, train, valid, config, "one-multimodal", checkpoint_path, metrics_path)


def run(train, valid, config: TrainConfig, **kwargs) -> TrainResult:
    if config.stage == "one":
        kwargs.pop("stage1_checkpoint", None)
        return train_stage1(train, valid, config, **kwargs)
    if config.stage == "two":
        return train_stage2(train, valid, config, **kwargs)
    kwargs.pop("stage1_checkpoint", None)
    return train_one_stage_multimodal(train, valid, config, **kwargs)
