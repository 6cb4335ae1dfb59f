import filecmp
from collections import Counter

import numpy as np
import pytest

from fba_reid.config import DataConfig
from fba_reid.synthdata import (PKSampler, SampleRecord, VocabularyError, bg_caption, corpus_entries,
                                default_vocab, fg_caption, generate_corpus, identity_colors, load_dataset,
                                pad_tokens, pk_sample, query_gallery_split, read_manifest, read_vocab,
                                render_image, split_by_identity, tokenize, write_manifest, write_vocab)


def test_tokenize_examples():
    assert tokenize([], {"red": 3}) == []
    assert tokenize(["red", "coat"], {"red": 3, "coat": 7}) == [3, 7]
    vocab = {f"w{i}": i for i in range(20)}
    assert tokenize([f"w{i}" for i in range(20)], vocab, max_len=12) == list(range(12))


def test_tokenize_lists_missing_words():
    with pytest.raises(VocabularyError, match="hat"):
        tokenize(["red", "hat"], {"red": 3})


def test_vocab_round_trip(tmp_path):
    vocab = default_vocab()
    write_vocab(tmp_path / "v.txt", vocab)
    assert read_vocab(tmp_path / "v.txt") == vocab
    assert vocab["<pad>"] == 0
    with pytest.raises(ValueError):
        write_vocab(tmp_path / "bad.txt", {"a": 0, "b": 2})


def test_identity_colours_deterministic_and_distinct():
    pairs = [identity_colors(p) for p in range(90)]
    assert len(set(pairs)) == 90
    assert all(u != l for u, l in pairs)
    assert identity_colors(5) == identity_colors(5)
    with pytest.raises(ValueError):
        identity_colors(90)


def test_captions_name_the_colours_and_scene():
    upper, lower = identity_colors(3)
    cap = fg_caption(3)
    assert upper in cap and lower in cap
    assert "pole" in bg_caption(1, True) and "pole" not in bg_caption(1, False)


def test_manifest_record_count(tmp_path):
    records = generate_corpus(DataConfig(num_ids=8, images_per_id=4, num_train_ids=4), tmp_path)
    assert len(records) == 32
    assert len(read_manifest(tmp_path / "manifest.jsonl")) == 32


def test_corpus_is_byte_identical_per_seed(tmp_path):
    cfg = DataConfig(num_ids=3, images_per_id=2, num_train_ids=2)
    generate_corpus(cfg, tmp_path / "a")
    generate_corpus(cfg, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for f in (tmp_path / "a" / "images").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()


def test_no_occluder_tokens_when_probability_zero(tmp_path):
    vocab = default_vocab()
    records = generate_corpus(DataConfig(num_ids=6, images_per_id=4, occluder_prob=0.0, num_train_ids=3), tmp_path)
    assert all(vocab["pole"] not in r.bg_tokens for r in records)


def test_fg_captions_constant_per_identity_bg_varies(small_corpus):
    records = read_manifest(small_corpus / "manifest.jsonl")
    by_pid = {}
    for r in records:
        by_pid.setdefault(r.pid, set()).add(tuple(r.fg_tokens))
    assert all(len(v) == 1 for v in by_pid.values())
    assert len({tuple(r.bg_tokens) for r in records}) > 1


def test_noise_free_corpus_separable_by_nearest_centroid():
    cfg = DataConfig(num_ids=12, images_per_id=4, noise=0.0, num_train_ids=6)
    feats, labels = [], []
    for pid, k, camid, scene, occ, rng in corpus_entries(cfg):
        img, meta = render_image(pid, camid, scene, occ, cfg, rng)
        upper = meta["upper_mask"]
        lower = meta["fg_mask"] & ~upper
        feats.append(np.concatenate([img[upper].mean(0), img[lower].mean(0)]))
        labels.append(pid)
    feats, labels = np.array(feats), np.array(labels)
    centroids = np.stack([feats[labels == p].mean(0) for p in range(12)])
    pred = np.argmin(((feats[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == labels).mean() == 1.0


def test_manifest_fields_exact(tmp_path):
    rec = SampleRecord("images/x.ppm", 1, 0, [1, 2], [3])
    write_manifest(tmp_path / "m.jsonl", [rec])
    assert read_manifest(tmp_path / "m.jsonl") == [rec]
    (tmp_path / "bad.jsonl").write_text('{"image": "x", "pid": 1, "camid": 0, "fg_tokens": [], '
                                        '"bg_tokens": [], "extra": 1}\n')
    with pytest.raises(ValueError, match="exactly"):
        read_manifest(tmp_path / "bad.jsonl")


def test_pad_tokens():
    assert pad_tokens([[1, 2], [3]], 3).tolist() == [[1, 2, 0], [3, 0, 0]]
    with pytest.raises(ValueError):
        pad_tokens([[1, 2, 3, 4]], 3)


def test_load_dataset_shapes(small_data):
    assert small_data.images.shape == (32, 32, 16, 3)
    assert small_data.images.dtype == np.float32
    assert 0.0 <= small_data.images.min() and small_data.images.max() <= 1.0
    assert small_data.fg_tokens.shape == (32, 12)


def test_split_by_identity_disjoint(small_data):
    train, test = split_by_identity(small_data, 4)
    assert set(train.pids) == {0, 1, 2, 3}
    assert set(test.pids) == {4, 5, 6, 7}


def test_query_gallery_split_first_per_camera():
    pids = np.array([1, 1, 1, 2, 2, 1])
    cams = np.array([0, 0, 1, 0, 0, 1])
    assert query_gallery_split(pids, cams).tolist() == [True, False, True, True, False, False]


# --- PK sampler ---------------------------------------------------------------------

def test_each_round_covers_every_id_once_when_divisible():
    pids = np.repeat(np.arange(4), 3)
    sampler = PKSampler(pids, P=2, K=2, seed=0)
    for r in range(3):
        seen = np.concatenate([np.unique(sampler.batch(2 * r + g).labels) for g in range(2)])
        assert sorted(seen.tolist()) == [0, 1, 2, 3]


def test_batch_has_k_copies_of_p_ids():
    pids = np.repeat(np.arange(10), 5)
    sampler = PKSampler(pids, P=4, K=3, seed=1)
    for step in range(12):
        b = sampler.batch(step)
        counts = Counter(b.labels.tolist())
        assert len(counts) == 4 and set(counts.values()) == {3}
        assert (pids[b.indices] == b.labels).all()
        assert len(set(b.indices.tolist())) == 12  # without replacement


def test_reference_batch_size():
    pids = np.repeat(np.arange(20), 6)
    assert len(pk_sample(pids, 16, 4, seed=0, epoch_pos=0).indices) == 64


def test_sampler_deterministic_and_replacement_for_small_ids():
    pids = np.array([0, 0, 1, 1, 1, 1, 2])
    a = pk_sample(pids, 3, 3, seed=5, epoch_pos=7)
    b = pk_sample(pids, 3, 3, seed=5, epoch_pos=7)
    assert np.array_equal(a.indices, b.indices)
    assert Counter(a.labels.tolist())[2] == 3


def test_sampler_rejects_too_large_p():
    with pytest.raises(ValueError):
        PKSampler([0, 0, 1, 1], P=3, K=2)


def test_every_batch_admits_a_triplet():
    pids = np.repeat(np.arange(7), 2)
    sampler = PKSampler(pids, 3, 2, seed=2)
    for step in range(20):
        labels = sampler.batch(step).labels
        assert len(set(labels.tolist())) >= 2 and max(Counter(labels.tolist()).values()) >= 2
