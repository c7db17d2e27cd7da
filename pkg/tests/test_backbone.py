import math

import pytest
import torch

from graphmt.backbone import (
    BOS,
    EOS,
    PAD,
    UNK,
    BackboneConfig,
    BackboneError,
    Hypothesis,
    Seq2SeqBackbone,
    Vocab,
    beam_search,
    greedy_search,
    sinusoidal_positions,
    tokenize,
)
from toy import exhaustive_best, toy_step_fn

# regression values from the first verified run (seed 0, d=8, input [4, 5, EOS])
GOLDEN_H = [
    [-0.614730179309845, -1.6195900440216064, -0.20787054300308228, 1.3536717891693115,
     0.5619762539863586, 0.9416165351867676, -1.1653352975845337, 0.750261664390564],
    [-0.9840412735939026, -1.0953314304351807, 0.8716512322425842, 0.5033373236656189,
     -1.0551354885101318, 1.5694116353988647, -0.6873482465744019, 0.8774564266204834],
    [1.211069107055664, -1.1230562925338745, -0.025472844019532204, 1.2776515483856201,
     -1.571102499961853, -0.22232168912887573, -0.4869979918003082, 0.9402308464050293],
]
GOLDEN_LOGITS_ROW0 = [
    -0.3920521140098572, 0.16521599888801575, 0.7238553762435913, 0.6834283471107483, 0.1707204282283783,
    0.089522585272789, 0.501140832901001, 0.4099351763725281, -0.13371336460113525, -0.3360517621040344,
]


@pytest.fixture
def model():
    torch.manual_seed(0)
    return Seq2SeqBackbone(BackboneConfig(vocab_size=10, dim=8, heads=2)).eval()


class TestVocab:
    def test_reserved_ids(self):
        v = Vocab(["hello", "world", "hello"])
        assert v.itos[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
        assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
        assert len(v) == 6
        assert v.encode(["hello", "mars"]) == [4, 3, EOS]
        assert v.decode([BOS, 4, 5, EOS, 4]) == ["hello", "world"]

    def test_build_is_first_seen_order(self):
        v = Vocab.build([tokenize("b a"), tokenize("c  a\tb")])
        assert v.itos[4:] == ["b", "a", "c"]


class TestEncoder:
    def test_golden(self, model):
        H, mask = model.encode(torch.tensor([[4, 5, EOS]]))
        assert H.shape == (1, 3, 8) and not mask.any()
        torch.testing.assert_close(H[0], torch.tensor(GOLDEN_H), atol=1e-6, rtol=0)

    def test_deterministic(self, model):
        x = torch.tensor([[4, 7, 9, EOS]])
        assert torch.equal(model.encode(x)[0], model.encode(x)[0])

    def test_trailing_pad_masked(self, model):
        short, _ = model.encode(torch.tensor([[4, 7, EOS]]))
        padded, mask = model.encode(torch.tensor([[4, 7, EOS, PAD, PAD]]))
        assert mask[0].tolist() == [False, False, False, True, True]
        torch.testing.assert_close(padded[:, :3], short, atol=1e-6, rtol=0)

    @pytest.mark.parametrize("bad", [torch.zeros(1, 0, dtype=torch.long), torch.tensor([[PAD, PAD]])])
    def test_empty_input(self, model, bad):
        with pytest.raises(BackboneError):
            model.encode(bad)

    def test_positions(self):
        pe = sinusoidal_positions(5, 8)
        assert pe.shape == (5, 8)
        assert pe[0, 0::2].abs().max() == 0 and (pe[0, 1::2] == 1).all()


class TestDecoder:
    def test_golden_row0(self, model):
        H, mask = model.encode(torch.tensor([[4, 5, EOS]]))
        logits = model.decode_logits(H, torch.tensor([[BOS, 6]]), mask)
        assert logits.shape == (1, 2, 10)
        torch.testing.assert_close(logits[0, 0], torch.tensor(GOLDEN_LOGITS_ROW0), atol=1e-6, rtol=0)

    def test_causal(self, model):
        H, mask = model.encode(torch.tensor([[4, 5, EOS]]))
        a = model.decode_logits(H, torch.tensor([[BOS, 6, 7, 8]]), mask)
        b = model.decode_logits(H, torch.tensor([[BOS, 6, 9, 4]]), mask)
        torch.testing.assert_close(a[:, :2], b[:, :2], atol=0, rtol=0)
        assert not torch.equal(a[:, 2:], b[:, 2:])

    def test_missing_bos(self, model):
        H, mask = model.encode(torch.tensor([[4, EOS]]))
        with pytest.raises(BackboneError, match="BOS"):
            model.decode_logits(H, torch.tensor([[6, 7]]), mask)


def uniform_step(prefix):
    return torch.full((prefix.shape[0], 7), -math.log(7), dtype=torch.float64)


class TestSearch:
    @pytest.mark.parametrize("seed", range(8))
    def test_beam_matches_exhaustive(self, seed):
        step = toy_step_fn(seed)
        tokens, score = exhaustive_best(step, 4)
        hyp = beam_search(step, beam_size=5, max_len=4)
        assert hyp.tokens == tokens
        assert abs(hyp.score - score) < 1e-6

    @pytest.mark.parametrize("seed", range(8))
    def test_beam_one_is_greedy(self, seed):
        step = toy_step_fn(seed)
        (greedy,) = greedy_search(step, max_len=6)
        beam = beam_search(step, beam_size=1, max_len=6)
        assert beam.tokens == greedy.tokens

    @pytest.mark.parametrize("seed", range(8))
    def test_wider_beam_never_worse(self, seed):
        step = toy_step_fn(seed)
        assert beam_search(step, 4, 5).score >= beam_search(step, 1, 5).score - 1e-6

    def test_uniform_tie_break(self):
        # every sequence scores -log 7 per token; the smallest tuple is (EOS,)
        assert beam_search(uniform_step, beam_size=3, max_len=4) == Hypothesis((EOS,), -math.log(7))
        assert greedy_search(uniform_step, 4)[0].tokens == (EOS,)

    def test_banned_tokens_never_emitted(self):
        def step(prefix):
            logp = torch.full((prefix.shape[0], 7), -10.0, dtype=torch.float64)
            logp[:, [PAD, BOS, UNK]] = 0.0
            logp[:, 5] = -1.0
            return logp
        hyp = beam_search(step, beam_size=2, max_len=3)
        assert hyp.tokens == (5, 5, 5)

    @pytest.mark.parametrize("kwargs", [{"max_len": 0}, {"beam_size": 0}])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(BackboneError):
            beam_search(uniform_step, **{"beam_size": 2, "max_len": 3, **kwargs})
        if "max_len" in kwargs:
            with pytest.raises(BackboneError):
                greedy_search(uniform_step, 0)
