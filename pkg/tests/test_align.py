import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from sicsrec import numerics as nx
from sicsrec.align import (
    PROMPT_TEMPLATE, ContentEncoderHead, CosineDiscriminator, ExternalCommandDiscriminator,
    SamplePairSet, build_prompt, encode_content, load_matrix, load_pairs,
    mean_intra_cluster_cosine, mean_pair_cosine, parse_verdict, run_sft, save_matrix,
    save_pairs, select_pairs, sft_loss,
)
from sicsrec.data import InteractionLog, ItemCatalog, SynthSpec, synth_generate


def nce_oracle(sim, tau):
    z = np.asarray(sim) / tau
    return float(np.mean(logsumexp(z, axis=1) - np.diag(z)))


def heads_oracle(layers, x):
    wa, ba, wb, bb = (p.value for p in layers)
    return np.maximum(x @ wa + ba, 0.0) @ wb + bb


def tiny_catalog(n=6, d_text=4, d_ima=3, seed=0):
    rng = np.random.default_rng(seed)
    text = np.vstack([np.zeros(d_text), rng.normal(size=(n, d_text))])
    image = np.vstack([np.zeros(d_ima), rng.normal(size=(n, d_ima))])
    return ItemCatalog([""] + [f"item {i}" for i in range(1, n + 1)], text, image)


# ----------------------------------------------------------------- prompts

def test_prompt_renders_target_and_candidates():
    p = build_prompt((7, "cooking pasta"), [(3, "ramen tour")])
    assert "7 - cooking pasta" in p.rendered_text
    assert "3-ramen tour" in p.rendered_text
    assert p.rendered_text.startswith("<Instruction>: You are a video similarity evaluation assistant")
    assert "output (-1,-1) directly" in p.rendered_text
    assert p.rendered_text == PROMPT_TEMPLATE.format(
        target_id=7, target_title="cooking pasta", candidates="3-ramen tour")


def test_candidates_joined_in_interaction_order():
    p = build_prompt((9, "t"), [(4, "b"), (2, "a"), (5, "c")])
    assert "are: 4-b, 2-a, 5-c." in p.rendered_text
    assert [i for i, _ in p.candidates] == [4, 2, 5]


def test_no_candidates_means_skip():
    assert build_prompt((7, "cooking pasta"), []) is None
    assert build_prompt((7, "cooking pasta"), [(7, "cooking pasta")]) is None


_title = st.text(st.characters(codec="ascii", exclude_characters="\r\n"), min_size=1, max_size=12)


@given(st.integers(1, 500), _title, st.lists(st.tuples(st.integers(1, 500), _title), min_size=1,
                                             max_size=5))
def test_rendering_is_stable_and_round_trips(tid, title, cands):
    p = build_prompt((tid, title), cands)
    if p is None:
        assert all(i == tid for i, _ in cands)
        return
    assert build_prompt((tid, title), cands).rendered_text == p.rendered_text
    sid = p.candidates[-1][0]
    v = parse_verdict(f"Answer: {tid}-{sid}", p)
    assert (v.target_id, v.similar_id, v.status) == (tid, sid, "valid")


def test_rendering_distinguishes_inputs():
    a = build_prompt((1, "x"), [(2, "y")]).rendered_text
    assert a != build_prompt((1, "x"), [(3, "y")]).rendered_text
    assert a != build_prompt((1, "z"), [(2, "y")]).rendered_text
    assert a != build_prompt((4, "x"), [(2, "y")]).rendered_text


# ------------------------------------------------------------------ verdicts

@pytest.fixture
def prompt73():
    return build_prompt((7, "cooking pasta"), [(3, "ramen tour")])


def test_valid_verdict(prompt73):
    v = parse_verdict("7-3", prompt73)
    assert (v.target_id, v.similar_id, v.status) == (7, 3, "valid")


def test_explicit_sentinel(prompt73):
    v = parse_verdict("(-1,-1)", prompt73)
    assert v.is_sentinel and v.status == "sentinel"


def test_unknown_candidate_is_invalid(prompt73):
    v = parse_verdict("7-99", prompt73)
    assert v.is_sentinel and v.status == "invalid"


def test_first_match_wins_and_garbage_is_invalid(prompt73):
    assert parse_verdict("I think 7 - 3, not 7-8", prompt73).status == "valid"
    assert parse_verdict("no idea", prompt73).status == "invalid"
    assert parse_verdict("", prompt73).status == "invalid"
    assert parse_verdict("3-7", prompt73).status == "invalid"


@given(st.text(max_size=60))
def test_parse_never_raises(reply):
    p = build_prompt((7, "cooking pasta"), [(3, "ramen tour")])
    v = parse_verdict(reply, p)
    assert v.status in {"valid", "sentinel", "invalid"}
    assert v.status == "valid" or v.is_sentinel


# ------------------------------------------------------------ pair selection

def test_identical_text_features_are_paired():
    cat = tiny_catalog(5)
    cat.text_feat[4] = cat.text_feat[2]
    pairs = select_pairs(InteractionLog({1: [1, 2, 3, 4]}), cat, CosineDiscriminator(cat, 0.99))
    assert pairs.pairs == [(4, 2)]
    assert (pairs.attempts, pairs.valid) == (1, 1)


def test_below_threshold_contributes_nothing():
    cat = tiny_catalog(4)
    cat.text_feat[1:] = np.eye(4)
    pairs = select_pairs(InteractionLog({1: [1, 2, 3], 2: [3, 4, 1]}), cat,
                         CosineDiscriminator(cat, 0.6))
    assert pairs.pairs == []
    assert pairs.sentinel == 2


def test_candidate_cap_uses_most_recent():
    seen = []

    def spy(prompt):
        seen.append([i for i, _ in prompt.candidates])
        return "(-1,-1)"

    cat = tiny_catalog(30)
    select_pairs(InteractionLog({1: list(range(1, 31))}), cat, spy, max_candidates=5)
    assert seen == [[25, 26, 27, 28, 29]]


def test_counters_add_up():
    replies = iter(["7-7", "(-1,-1)", "nonsense"])
    cat = tiny_catalog(6)
    log_ = InteractionLog({1: [1, 2, 3], 2: [2, 3, 4], 3: [3, 4, 5], 4: [6]})

    def scripted(prompt):
        r = next(replies)
        return r.replace("7-7", f"{prompt.target_item_id}-{prompt.candidates[0][0]}")

    out = select_pairs(log_, cat, scripted)
    assert out.valid + out.sentinel + out.invalid == out.attempts == 3
    assert out.skipped == 1
    assert out.pairs == [(3, 1)]


def test_full_signal_pairs_share_clusters():
    cat, log_ = synth_generate(SynthSpec(num_users=400, num_items=200, num_clusters=8,
                                         signal_strength=1.0, seed=0))
    pairs = select_pairs(log_, cat, CosineDiscriminator(cat, 0.6))
    assert len(pairs) > 50
    purity = np.mean([cat.clusters[a] == cat.clusters[b] for a, b in pairs.pairs])
    assert purity >= 0.9


def test_external_command_discriminator():
    cat = tiny_catalog(4)
    # replies with the target and the first candidate, as an LLM might
    script = ("import re, sys; t = sys.stdin.read(); "
              "print('4-' + re.search(r'candidate videos are: (\\d+)', t).group(1))")
    disc = ExternalCommandDiscriminator([sys.executable, "-c", script], timeout=30)
    pairs = select_pairs(InteractionLog({1: [2, 3, 4]}), cat, disc)
    assert pairs.pairs == [(4, 2)]


def test_external_command_failure_is_counted():
    cat = tiny_catalog(4)
    disc = ExternalCommandDiscriminator([sys.executable, "-c", "raise SystemExit(1)"], timeout=30)
    pairs = select_pairs(InteractionLog({1: [2, 3, 4], 2: [1, 2, 3]}), cat, disc)
    assert (pairs.failures, len(pairs)) == (2, 0)


def test_pairs_file_round_trip(tmp_path):
    pairs = SamplePairSet([(1, 2), (3, 4)])
    save_pairs(pairs, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "target_id,similar_id"
    assert load_pairs(tmp_path / "p.csv").pairs == [(1, 2), (3, 4)]


# ----------------------------------------------------------------- SFT loss

def test_single_pair_loss_is_zero():
    cat = tiny_catalog()
    heads = ContentEncoderHead.init(4, 3, 5, seed=1)
    total, parts = sft_loss([(1, 2)], cat, heads, parts=True)
    assert total.item() == 0.0
    assert parts == {"t2t": 0.0, "i2i": 0.0, "t2i": 0.0}


def test_identical_outputs_give_three_log_two():
    cat = tiny_catalog()
    heads = ContentEncoderHead.init(4, 3, 5, seed=1)
    for layers in (heads.text, heads.image):
        layers[2].value[:] = 0.0
        layers[3].value[:] = 0.3
    assert sft_loss([(1, 2), (3, 4)], cat, heads).item() == pytest.approx(3 * np.log(2), abs=1e-12)


def test_loss_is_sum_of_three_info_nce_terms():
    cat = tiny_catalog(10)
    heads = ContentEncoderHead.init(4, 3, 5, seed=2)
    pairs = np.array([(1, 2), (3, 9), (5, 6), (8, 7)])
    tau = 0.3
    tp, tq = (heads_oracle(heads.text, cat.text_feat[c]) for c in pairs.T)
    gp, gq = (heads_oracle(heads.image, cat.image_feat[c]) for c in pairs.T)
    expected = nce_oracle(tp @ tq.T, tau) + nce_oracle(gp @ gq.T, tau) + nce_oracle(tp @ gp.T, tau)
    assert abs(sft_loss(pairs, cat, heads, tau).item() - expected) <= 1e-10


def test_empty_batch_rejected():
    with pytest.raises(nx.ParameterError):
        sft_loss([], tiny_catalog(), ContentEncoderHead.init(4, 3, 5))


def test_sft_gradient_check():
    cat = tiny_catalog(8)
    heads = ContentEncoderHead.init(4, 3, 3, seed=3, hidden=4)
    pairs = [(1, 2), (3, 4), (5, 8)]
    assert nx.grad_check(lambda: sft_loss(pairs, cat, heads, 0.5), heads.params) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.05, 2.0))
def test_sft_components_nonnegative(seed, n, tau):
    cat = tiny_catalog(12, seed=seed)
    rng = np.random.default_rng(seed)
    pairs = rng.integers(1, 13, size=(n, 2))
    total, parts = sft_loss(pairs, cat, ContentEncoderHead.init(4, 3, 5, seed=seed), tau, parts=True)
    assert all(v >= -1e-12 for v in parts.values())
    assert total.item() >= -1e-12


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def synth():
    cat, log_ = synth_generate(SynthSpec(num_users=600, num_items=300, num_clusters=8,
                                         d_text=64, d_ima=64, seed=4))
    pairs = select_pairs(log_, cat, CosineDiscriminator(cat, 0.6))
    return cat, pairs


def test_sft_decreases_loss(synth):
    cat, pairs = synth
    sub = SamplePairSet(pairs.pairs[:200])
    res = run_sft(sub, cat, ContentEncoderHead.init(64, 64, 16, seed=0), epochs=30, seed=0)
    assert len(res.loss_curve) == 30
    assert res.loss_curve[-1] < res.loss_curve[0]


def test_zero_epochs_leave_heads_untouched(synth):
    cat, pairs = synth
    heads = ContentEncoderHead.init(64, 64, 16, seed=0)
    before = heads.state()
    run_sft(pairs, cat, heads, epochs=0)
    after = heads.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_sft_is_deterministic(synth):
    cat, pairs = synth
    a = run_sft(pairs, cat, ContentEncoderHead.init(64, 64, 16, seed=5), epochs=3, seed=5)
    b = run_sft(pairs, cat, ContentEncoderHead.init(64, 64, 16, seed=5), epochs=3, seed=5)
    assert a.loss_curve == b.loss_curve
    sa, sb = a.heads.state(), b.heads.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_empty_pair_set_advises_threshold(synth):
    cat, _ = synth
    with pytest.raises(ValueError, match="threshold"):
        run_sft(SamplePairSet([]), cat, ContentEncoderHead.init(64, 64, 16))


def test_sft_tightens_clusters_and_aligns_modalities(synth):
    cat, pairs = synth
    heads = ContentEncoderHead.init(64, 64, 16, seed=0)
    et0, ei0 = encode_content(cat, heads)
    run_sft(pairs, cat, heads, epochs=30, seed=0)
    et1, ei1 = encode_content(cat, heads)
    assert mean_intra_cluster_cosine(et1, cat.clusters) > mean_intra_cluster_cosine(et0, cat.clusters)
    assert mean_pair_cosine(et1[1:], ei1[1:]) > mean_pair_cosine(et0[1:], ei0[1:])


# ---------------------------------------------------------------- encoding

def test_encode_content_rows():
    cat = tiny_catalog(5)
    cat.text_feat[3] = cat.text_feat[1]
    cat.image_feat[3] = cat.image_feat[1]
    heads = ContentEncoderHead.init(4, 3, 6, seed=1)
    et, ei = encode_content(cat, heads)
    assert et.shape == ei.shape == (6, 6)
    assert np.array_equal(et[3], et[1]) and np.array_equal(ei[3], ei[1])
    assert not et[0].any() and not ei[0].any()
    np.testing.assert_allclose(et[1:], heads_oracle(heads.text, cat.text_feat[1:]), atol=1e-12)


def test_encode_content_dimension_mismatch():
    with pytest.raises(ValueError, match="d=8"):
        encode_content(tiny_catalog(), ContentEncoderHead.init(4, 3, 6), d=8)


def test_matrix_cache_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(5, 3))
    save_matrix(m, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().startswith("# sicsrec-matrix v1 rows=5 cols=3\n")
    assert np.array_equal(load_matrix(tmp_path / "m.csv"), m)
    (tmp_path / "bad.csv").write_text("1,2\n")
    with pytest.raises(ValueError):
        load_matrix(tmp_path / "bad.csv")
