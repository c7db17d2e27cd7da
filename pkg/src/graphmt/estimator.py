"""scikit-learn style front end.

``X`` is a sequence of ``(graph, source)`` pairs where ``graph`` is a
multimodal or linguistic scene graph and ``source`` a whitespace-tokenized
string or token list; ``y`` holds the target sentences.

Two-stage training is two ``fit`` calls on one estimator::

    est = GraphGuidedTranslator(stage="one", lr=1e-3).fit(X_msg, y_msg)
    est.set_params(stage="two", lr=None).fit(X_lsg, y_lsg)   # adapter carried over
    est.predict(X_lsg_test)
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import Vocab, tokenize
from .bleu import corpus_bleu
from .checkpoint import Checkpoint, build_model
from .embeddings import embed_graph, make_provider
from .scene_graph import SuperGraph
from .training import ParallelExample, TrainConfig, run


def _tokens(text) -> list[str]:
    return tokenize(text) if isinstance(text, str) else list(text)


def check_pairs(X, y=None) -> list[ParallelExample]:
    """Validate ``X`` (and ``y``) and convert to training examples."""
    X = list(X)
    if y is not None:
        y = list(y)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
    if not X:
        raise ValueError("need at least one sample")
    out = []
    for i, item in enumerate(X):
        try:
            graph, source = item
        except (TypeError, ValueError):
            raise ValueError(f"sample {i} is not a (graph, source) pair") from None
        if not isinstance(graph, SuperGraph):
            raise TypeError(f"sample {i}: expected a scene graph with a super node, got {type(graph).__name__}")
        src = _tokens(source)
        if not src:
            raise ValueError(f"sample {i}: empty source sentence")
        out.append(ParallelExample(graph, src, _tokens(y[i]) if y is not None else []))
    return out


class GraphGuidedTranslator(BaseEstimator):
    def __init__(
        self,
        stage="one",
        dim=16,
        layers=2,
        heads=2,
        enc_layers=2,
        dec_layers=2,
        lr=None,
        lr_end=0.0,
        power=1.0,
        batch_size=64,
        patience=5,
        max_epochs=50,
        seed=0,
        no_gate=False,
        skip_stage1=False,
        unfreeze_encoder=False,
        provider="stub",
        beam_size=5,
        max_len=None,
    ):
        self.stage = stage
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.lr = lr
        self.lr_end = lr_end
        self.power = power
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.seed = seed
        self.no_gate = no_gate
        self.skip_stage1 = skip_stage1
        self.unfreeze_encoder = unfreeze_encoder
        self.provider = provider
        self.beam_size = beam_size
        self.max_len = max_len

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            stage=self.stage, lr=self.lr, lr_end=self.lr_end, power=self.power,
            batch_size=self.batch_size, patience=self.patience, max_epochs=self.max_epochs,
            seed=self.seed, no_gate=self.no_gate, skip_stage1=self.skip_stage1,
            unfreeze_encoder=self.unfreeze_encoder, dim=self.dim, layers=self.layers,
            heads=self.heads, provider=self.provider, enc_layers=self.enc_layers,
            dec_layers=self.dec_layers, max_len=self.max_len,
        )

    def fit(self, X, y, eval_set=None, vocab: Vocab | None = None):
        """Train one stage. In stage ``"two"`` a previous stage-one fit is continued
        unless ``skip_stage1`` is set."""
        train = check_pairs(X, y)
        valid = check_pairs(*eval_set) if eval_set is not None else None
        config = self._train_config()
        kwargs = {}
        if config.stage == "two" and not config.skip_stage1:
            check_is_fitted(self, "checkpoint_")
            kwargs["stage1_checkpoint"] = self.checkpoint_
        else:
            kwargs["vocab"] = vocab
        result = run(train, valid, config, **kwargs)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.vocab_ = result.model.vocab
        self.metrics_ = result.metrics
        self.best_epoch_ = result.best_epoch
        self.n_iter_ = result.steps
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        examples = check_pairs(X)
        provider = make_provider(self.provider, self.model_.config.dim)
        max_len = self.max_len or max(len(ex.source) for ex in examples) * 2 + 5
        out = []
        for ex in examples:
            hyp = self.model_.beam(self.vocab_.encode(ex.source), embed_graph(ex.graph, provider), self.beam_size, max_len)
            out.append(" ".join(self.vocab_.decode(hyp.tokens)))
        return out

    def score(self, X, y) -> float:
        """Corpus BLEU of beam-search output against ``y``."""
        hyps = [tokenize(h) for h in self.predict(X)]
        return corpus_bleu(hyps, [_tokens(t) for t in y]).bleu

    def save(self, path) -> None:
        check_is_fitted(self, "checkpoint_")
        self.checkpoint_.save(path)

    @classmethod
    def load(cls, path, **params) -> "GraphGuidedTranslator":
        ckpt = Checkpoint.load(path)
        model = build_model(ckpt)
        cfg = ckpt.meta["config"]
        est = cls(dim=cfg["dim"], layers=cfg["layers"], heads=cfg["heads"],
                  enc_layers=cfg["enc_layers"], dec_layers=cfg["dec_layers"],
                  no_gate=cfg["no_gate"], provider=ckpt.meta.get("provider", "stub"), **params)
        est.model_, est.checkpoint_, est.vocab_ = model, ckpt, model.vocab
        return est
