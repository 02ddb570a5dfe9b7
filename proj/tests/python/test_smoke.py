import math

import numpy as np
import pytest

import pfeed

SMALL = {
    "world": {"categories": 8, "items_per_category": 20, "customers": 300, "sessions": 3000},
    "mining": {"top_n": 150},
    "negative_items": 100,
    "vocab_size": 500,
    "model": {"layers": 1, "heads": 2, "hidden_dim": 16},
    "training": {"epochs": 1, "batch_size": 32, "uniform_negatives": 16},
    "eval": {"distractor_count": 100},
}


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_config_defaults_and_rejection():
    cfg = pfeed.default_config()
    assert cfg["feed"]["surface"] == "all"
    assert pfeed.normalize_config({"seed": 3})["seed"] == 3
    with pytest.raises(pfeed.ContractError):
        pfeed.normalize_config({"trainnig": {}})


def test_tokenizer():
    vocab = pfeed.Vocabulary.train(["red shoe", "blue shoe"], 12)
    assert vocab.id("shoe") is not None
    assert vocab.encode("") == []
    assert len(pfeed.Vocabulary.train(["red shoe", "blue shoe"], 6)) == 6


def test_encoder_outputs_unit_vectors():
    cfg = pfeed.EncoderConfig()
    cfg.layers, cfg.heads, cfg.hidden_dim, cfg.vocab_size, cfg.max_seq = 1, 2, 8, 24, 9
    enc = pfeed.Encoder(cfg, 1)
    out = enc.forward_simo([5, 6, 7])
    for key in ("q_view", "q_buy", "target"):
        assert out[key].shape == (8,)
        assert np.linalg.norm(out[key]) == pytest.approx(1, abs=1e-5)
    assert enc.parameter_count() == cfg.parameter_count()
    with pytest.raises(pfeed.InputError):
        enc.forward_simo([24])


def test_losses_match_direct_evaluation():
    rng = np.random.default_rng(0)
    q, t, n = unit_rows(rng, 2, 3), unit_rows(rng, 2, 3), unit_rows(rng, 1, 3)
    beta = 4.0
    s = beta * np.concatenate([q @ t.T, q @ n.T], axis=1)
    expect = np.mean([-s[i, i] + math.log(np.exp(s[i]).sum()) for i in range(2)])
    assert pfeed.loss_query_to_target(q, t, n, beta) == pytest.approx(expect, rel=1e-12)
    q4, t4, n4 = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    assert pfeed.loss_target_to_query(q4, t4, n4, 0.0) == pytest.approx(math.log(8))


def test_index_and_percentile():
    rng = np.random.default_rng(1)
    x = unit_rows(rng, 50, 4).astype(np.float32)
    ids = [f"i{k:03d}" for k in range(50)]
    exact = pfeed.VectorIndex.build(ids, x)
    ivf = pfeed.VectorIndex.build(ids, x, "ivf", clusters=50, nprobe=50)
    hits = exact.search(x[7], 5)
    assert hits[0][0] == "i007"
    assert hits[0][1] == pytest.approx(1, abs=1e-6)
    assert ivf.search(x[7], 5) == hits
    brute = np.argsort(-(x @ x[7]), kind="stable")[:5]
    assert [h[0] for h in hits] == [ids[b] for b in brute]
    assert pfeed.nearest_rank_percentile([k / 100 for k in range(1, 101)], 1) == 0.01


def test_pipeline_end_to_end(tmp_path):
    cfg = dict(SMALL, paths={"work_dir": str(tmp_path)})
    assert pfeed.synth(cfg)["items"] == 160
    pfeed.mine(cfg)
    pfeed.tokenizer_train(cfg)
    pfeed.train(cfg)
    pfeed.embed(cfg)
    pfeed.index(cfg)
    summary = pfeed.precompute(cfg)
    assert summary["entries"] > 0

    store = pfeed.SimilarityStore.load(str(tmp_path / "store.tsv"))
    assert len(store) == summary["entries"]
    assert store.lookup("nope", "view") == []
    stored = [r for k in range(160) for r in store.lookup(f"i{k:05d}", "view")]
    assert stored
    assert all(score > store.tau for _, score in stored)

    svc = pfeed.FeedService(cfg)
    assert svc.customers > 0
    assert svc.feed("no-such-customer") is None
    assert svc.ingest("new-customer", "i00000", "view", 10**9)
    assert not svc.ingest("new-customer", "not-an-item", "view", 10**9)
    svc.refresh()
    fresh = svc.feed("new-customer")
    assert fresh and all(item["source_item_id"] == "i00000" for item in fresh)

    report = pfeed.evaluate(cfg)
    assert 0 <= report["recall"] <= 1


def test_missing_artifact_is_an_input_error(tmp_path):
    with pytest.raises(pfeed.InputError, match="pfeed synth"):
        pfeed.mine({"paths": {"work_dir": str(tmp_path)}})
