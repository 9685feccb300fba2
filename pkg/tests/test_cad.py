import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crashscen.cad import (
    CadConfig,
    DecodeError,
    Greedy,
    Sample,
    cad_distribution,
    combine_logits,
    decode,
    decode_plain,
    greedy_choice,
    pmi_reweighted,
    read_trace,
    softmax,
    write_trace,
)
from crashscen.token_model import PromptBundle, TableModel, TableRule, load_model

import oracles

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


@st.composite
def logit_pairs(draw, min_dim=2, max_dim=64):
    n = draw(st.integers(min_dim, max_dim))
    a = draw(arrays(np.float64, n, elements=finite))
    b = draw(arrays(np.float64, n, elements=finite))
    return a, b


alphas = st.sampled_from([0.0, 0.3, 0.7, 2.0]) | st.floats(0, 5)


def test_combine_known_values():
    out = combine_logits([2.0, 1.0], [1.0, 2.0], 0.7).logits
    np.testing.assert_allclose(out, [2.7, 0.3], atol=1e-12)
    assert softmax(out)[0] == pytest.approx(0.916827303506, abs=1e-12)


def test_softmax_survives_large_logits():
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)
    assert softmax([30.0, 0.0])[0] == pytest.approx(0.9999999999999064, abs=1e-15)


def test_negative_alpha_rejected():
    with pytest.raises(ValueError):
        combine_logits([1.0], [1.0], -0.1)
    with pytest.raises(ValueError):
        CadConfig(alpha=-1)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        combine_logits([1.0, 2.0], [1.0], 0.5)


@given(logit_pairs(), alphas)
def test_equivalent_to_reweighted_product(pair, alpha):
    a, b = pair
    np.testing.assert_allclose(cad_distribution(a, b, alpha), oracles.cad_normalized(a, b, alpha), atol=1e-7)
    np.testing.assert_allclose(pmi_reweighted(softmax(a), softmax(b), alpha), cad_distribution(a, b, alpha), atol=1e-9)


@given(logit_pairs(), alphas, finite, finite)
def test_shift_invariance(pair, alpha, s1, s2):
    a, b = pair
    np.testing.assert_allclose(cad_distribution(a + s1, b + s2, alpha), cad_distribution(a, b, alpha), atol=1e-9)


@given(logit_pairs(), st.floats(0, 3), st.floats(0.01, 3))
def test_amplification_is_monotone(pair, alpha, step):
    """Raising alpha never lowers a token whose conditioned log-ratio beats the rest."""
    a, b = pair
    pc, pu = softmax(a), softmax(b)
    ratio = np.log(pc) - np.log(pu)
    i = int(np.argmax(ratio))
    if np.sum(ratio == ratio[i]) > 1:
        return
    lo = cad_distribution(a, b, alpha)[i]
    hi = cad_distribution(a, b, alpha + step)[i]
    assert hi >= lo - 1e-12


@given(logit_pairs())
def test_alpha_zero_is_plain_argmax(pair):
    a, b = pair
    assert greedy_choice(combine_logits(a, b, 0.0).logits) == int(np.argmax(a))
    np.testing.assert_array_equal(combine_logits(a, b, 0.0).logits, a)


def test_greedy_ties_go_to_lowest_index():
    assert greedy_choice(np.array([1.0, 3.0, 3.0, 0.0])) == 1


@pytest.fixture
def flip(fixtures):
    return load_model(fixtures / "context_flip.model")


def _words(model, ids):
    return model.vocabulary.decode(ids)


def test_context_wins_under_cad(flip):
    bundle = PromptBundle("the road has Two lanes", "how many lanes")
    ids, trace = decode(flip, bundle, CadConfig(0.7, 8, frozenset({flip.vocabulary.index("<eos>")})))
    assert _words(flip, ids) == ["Two"]
    assert trace.check()


def test_without_context_gives_prior(flip):
    bundle = PromptBundle("the road has Two lanes", "how many lanes").without_context()
    ids, _ = decode(flip, bundle, CadConfig(0.0, 8, frozenset({flip.vocabulary.index("<eos>")})))
    assert _words(flip, ids) == ["Four"]


def test_stop_token_is_traced_not_returned(flip):
    eos = flip.vocabulary.index("<eos>")
    ids, trace = decode(flip, PromptBundle("ctx", "q"), CadConfig(0.7, 8, frozenset({eos})))
    assert eos not in ids
    assert trace.tokens[-1] == eos
    assert len(trace) == len(ids) + 1


def test_max_tokens_caps_length():
    model = TableModel(["a", "b"], default=[1.0, 0.0])
    ids, trace = decode(model, PromptBundle("c", "q"), CadConfig(0.7, 5))
    assert ids == [0] * 5 and len(trace) == 5


def test_trace_round_trip(tmp_path, flip):
    _, trace = decode(flip, PromptBundle("ctx", "q"), CadConfig(0.7, 4))
    write_trace(trace, tmp_path / "t.jsonl")
    back = read_trace(tmp_path / "t.jsonl")
    assert back.tokens == trace.tokens
    assert back.alpha == trace.alpha
    assert back.check()


def test_trace_check_detects_tampering(flip):
    _, trace = decode(flip, PromptBundle("ctx", "q"), CadConfig(0.7, 2))
    step = trace.steps[0]
    object.__setattr__(step, "combined", step.combined + 1e-3)
    assert not trace.check()


def test_sampling_is_seeded(flip):
    cfg = CadConfig(0.7, 6, selection=Sample(temperature=5.0, seed=11))
    first, _ = decode(flip, PromptBundle("ctx", "q"), cfg)
    second, _ = decode(flip, PromptBundle("ctx", "q"), cfg)
    assert first == second


def test_sample_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        Sample(temperature=0.0)


class _Broken:
    def __init__(self, fail_at):
        self.inner = TableModel(["a", "b"], default=[1.0, 0.0])
        self.vocabulary = self.inner.vocabulary
        self.fail_at = fail_at

    def logits_with_context(self, bundle):
        if len(bundle.prefix) == self.fail_at:
            raise ConnectionError("backend went away")
        return self.inner.logits_with_context(bundle)

    def logits_without_context(self, bundle):
        return self.inner.logits_without_context(bundle)


def test_backend_failure_keeps_partial_trace():
    with pytest.raises(DecodeError) as info:
        decode(_Broken(3), PromptBundle("c", "q"), CadConfig(0.7, 10))
    assert len(info.value.trace) == 3


def test_plain_decode_matches_alpha_zero():
    model = TableModel(
        ["x", "y", "<eos>"],
        [TableRule("ctx", (0.0, 2.0, 0.0), at=0), TableRule("noctx", (3.0, 0.0, 0.0), at=0), TableRule("any", (0.0, 0.0, 1.0), at=2)],
        default=[1.0, 0.0, 0.0],
    )
    bundle = PromptBundle("ctx", "q")
    ids, _ = decode(model, bundle, CadConfig(0.0, 10, frozenset({2}), Greedy()))
    assert ids == decode_plain(model, bundle, 10, {2})
    assert len(ids) == 2
