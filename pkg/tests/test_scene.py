import random
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from nct.scene import (CHANGE_TYPES, COLORS, DEP_TAGS, SPECIAL_TOKENS, DatasetFormatError, Jitter, SceneConfig,
                       SceneObject, build_vocabulary, caption_words, change_footprint, change_type_from_words,
                       generate_dataset, grammar_vocabulary, load_dataset, realize_caption, render_feature_grid,
                       render_pair, sample_scene_pair, save_dataset)

CFG = SceneConfig()


def pair_for(seed, **overrides):
    return sample_scene_pair(np.random.default_rng(seed), replace(CFG, **overrides))


def only(kind):
    return {k: float(k == kind) for k in CHANGE_TYPES}


# -- sampling ------------------------------------------------------------------

def test_sampling_is_deterministic():
    assert pair_for(1) == pair_for(1)
    assert pair_for(1) != pair_for(2)


def test_forced_none_keeps_scene():
    for seed in range(20):
        p = pair_for(seed, change_weights=only("none"))
        assert p.change.kind == "none"
        assert p.before == p.after


@pytest.mark.parametrize("kind", ["color", "texture", "add", "drop", "move"])
def test_only_the_recorded_change_differs(kind):
    for seed in range(25):
        p = pair_for(seed, change_weights=only(kind))
        ch = p.change
        before = {o.id: o for o in p.before}
        after = {o.id: o for o in p.after}
        untouched = set(before) & set(after) - {ch.object_id}
        assert all(before[i] == after[i] for i in untouched)
        if kind == "add":
            assert set(after) - set(before) == {ch.object_id}
            assert after[ch.object_id] == ch.after
        elif kind == "drop":
            assert set(before) - set(after) == {ch.object_id}
        else:
            old, new = before[ch.object_id], after[ch.object_id]
            assert (old, new) == (ch.before, ch.after)
            diff = {f for f in ("shape", "color", "material", "size", "position")
                    if getattr(old, f) != getattr(new, f)}
            assert diff == {"color": {"color"}, "texture": {"material"}, "move": {"position"}}[kind]


def test_objects_never_share_cells_and_stay_on_grid():
    for seed in range(200):
        p = pair_for(seed)
        for scene in (p.before, p.after):
            cells = [o.position for o in scene]
            assert len(cells) == len(set(cells))
            for r, c in cells:
                # placement leaves room for the jitter translation
                assert CFG.jitter_max <= r < CFG.grid_h - CFG.jitter_max
                assert CFG.jitter_max <= c < CFG.grid_w - CFG.jitter_max
        assert CFG.n_objects_min <= len(p.before) <= CFG.n_objects_max
        assert max(abs(p.jitter.drow), abs(p.jitter.dcol)) <= CFG.jitter_max


def test_change_type_frequencies_are_uniform():
    counts = Counter(pair_for(seed).change.kind for seed in range(10_000))
    for kind in CHANGE_TYPES:
        assert abs(counts[kind] / 10_000 - 1 / 6) < 0.02, counts


def test_grid_too_small_is_rejected():
    with pytest.raises(ValueError):
        pair_for(0, grid_h=3, grid_w=3)


def test_unknown_change_weight_is_rejected():
    with pytest.raises(ValueError):
        pair_for(0, change_weights={"explode": 1.0})


# -- rendering -----------------------------------------------------------------

def test_empty_scene_is_background():
    grid = render_feature_grid([], Jitter(), CFG)
    assert grid.shape == (CFG.channels, CFG.grid_h, CFG.grid_w)
    np.testing.assert_array_equal(grid, np.broadcast_to(grid[:, :1, :1], grid.shape))


def test_single_object_peaks_at_its_cell():
    obj = SceneObject(0, "cube", "red", "metal", "large", (2, 4))
    grid = render_feature_grid([obj], None, CFG)
    background = render_feature_grid([], None, CFG)
    energy = np.linalg.norm(grid - background, axis=0)
    assert np.unravel_index(np.argmax(energy), energy.shape) == (2, 4)


def test_translation_shifts_the_grid():
    p = pair_for(3)
    plain = render_feature_grid(p.before, Jitter(0, 0), CFG)
    down = render_feature_grid(p.before, Jitter(1, 0), CFG)
    np.testing.assert_array_equal(down[:, 1:, :], plain[:, :-1, :])
    right = render_feature_grid(p.before, Jitter(0, -1), CFG)
    np.testing.assert_array_equal(right[:, :, :-1], plain[:, :, 1:])


def test_noise_only_touches_the_after_view():
    p = pair_for(4, change_weights=only("none"))
    before, after = render_pair(p, CFG)
    np.testing.assert_array_equal(before, render_feature_grid(p.before, None, CFG))
    clean_after = render_feature_grid(p.after, replace(p.jitter, sigma=0.0), CFG)
    residual = after - clean_after
    assert residual.std() == pytest.approx(CFG.noise_sigma, rel=0.1)


def test_rendering_is_deterministic():
    p = pair_for(5)
    a1, b1 = render_pair(p, CFG)
    a2, b2 = render_pair(p, CFG)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)


def test_footprint_holds_the_largest_change():
    # with translation and noise removed, the biggest per-cell difference lies in the footprint
    for seed in range(300):
        p = pair_for(seed)
        if p.change.kind == "none":
            continue
        still = replace(p, jitter=Jitter(0, 0, 0.0))
        before = render_feature_grid(still.before, None, CFG)
        after = render_feature_grid(still.after, still.jitter, CFG)
        energy = np.linalg.norm(after - before, axis=0)
        peak = np.unravel_index(np.argmax(energy), energy.shape)
        assert tuple(int(v) for v in peak) in change_footprint(still), (seed, p.change.kind)


def test_footprint_follows_the_translation():
    p = pair_for(7, change_weights=only("color"))
    shifted = replace(p, jitter=Jitter(1, -1, 0.0))
    r, c = p.change.after.position
    assert (r + 1, c - 1) in change_footprint(shifted)
    assert len(change_footprint(shifted)) == 9


def test_move_footprint_covers_both_positions():
    p = pair_for(8, change_weights=only("move"))
    fp = change_footprint(p)
    d = (p.jitter.drow, p.jitter.dcol)
    for pos in (p.change.before.position, p.change.after.position):
        assert (pos[0] + d[0], pos[1] + d[1]) in fp


def test_drop_footprint_is_in_the_before_frame():
    p = pair_for(9, change_weights=only("drop"))
    assert p.change.before.position in change_footprint(p)


# -- captions --------------------------------------------------------------------

def test_none_caption_is_fixed():
    words, tags = caption_words(pair_for(0, change_weights=only("none")))
    assert words == ["no", "change", "was", "made"]
    assert tags == ["det", "nsubjpass", "auxpass", "root"]


def test_move_caption_on_small_brown_cube():
    for seed in range(2000):
        p = pair_for(seed, change_weights=only("move"))
        o = p.change.before
        if (o.size, o.color, o.shape) == ("small", "brown", "cube"):
            break
    else:
        pytest.fail("no small brown cube moved in 2000 draws")
    words, tags = caption_words(p)
    for w in ("small", "brown", "cube", "moved"):
        assert w in words
    assert tags[words.index("cube")] == "nsubj"
    assert tags[words.index("moved")] == "root"
    # the referent noun sits between the subject noun and the verb
    assert words.index("cube") < words.index("near") < words.index("moved")


def test_referent_is_nearest_other_object():
    p = pair_for(11, change_weights=only("color"))
    target = p.change.before
    others = [o for o in p.before if o.id != target.id]
    dist = [(o.position[0] - target.position[0]) ** 2 + (o.position[1] - target.position[1]) ** 2 for o in others]
    nearest = others[int(np.argmin(dist))]
    words, _ = caption_words(p)
    i = words.index("near")
    assert words[i + 2:i + 4] == [nearest.color, nearest.shape]


@pytest.mark.parametrize("kind,verb", [("color", "turned"), ("texture", "became"), ("add", "added"),
                                       ("drop", "disappeared"), ("move", "moved"), ("none", "made")])
def test_verb_maps_back_to_change_type(kind, verb):
    words, _ = caption_words(pair_for(12, change_weights=only(kind)))
    assert verb in words
    assert change_type_from_words(words) == kind


def test_change_type_from_words_unknown():
    assert change_type_from_words(["the", "red", "cube"]) == "unknown"


def test_tokens_and_tags_align():
    vocab = grammar_vocabulary()
    for s in generate_dataset(replace(CFG, seed=5), 1000, vocab):
        assert len(s.caption.tokens) == len(s.caption.dep_tags)
        assert all(0 <= t < vocab.size for t in s.caption.tokens)
        assert all(0 <= t < vocab.n_tags for t in s.caption.dep_tags)
        assert s.caption.tokens[0] == vocab.bos_id and s.caption.tokens[-1] == vocab.eos_id


# -- vocabulary --------------------------------------------------------------------

def test_single_sentence_vocabulary():
    v = build_vocabulary([["the", "cube", "moved"]])
    assert v.tokens == list(SPECIAL_TOKENS) + ["cube", "moved", "the"]
    assert v.size == 7
    assert len({v.pad_id, v.bos_id, v.eos_id, v.unk_id}) == 4


def test_vocabulary_ignores_corpus_order():
    corpus = [["a", "b", "b"], ["c", "a"], ["d"], ["b"]]
    shuffled = corpus[:]
    random.Random(0).shuffle(shuffled)
    assert build_vocabulary(corpus).tokens == build_vocabulary(shuffled).tokens
    assert build_vocabulary(corpus).tokens[4:] == ["b", "a", "c", "d"]


def test_empty_corpus_is_rejected():
    with pytest.raises(ValueError):
        build_vocabulary([[]])


def test_vocabulary_roundtrip_and_encoding():
    v = grammar_vocabulary()
    assert v.decode(v.encode(["the", "red", "cube"])) == ["the", "red", "cube"]
    assert v.encode(["zebra"], strict=False) == [v.unk_id]
    with pytest.raises(KeyError):
        v.encode(["zebra"])
    assert type(v).from_dict(v.to_dict()).tokens == v.tokens


def test_grammar_is_closed():
    vocab = grammar_vocabulary()
    for s in generate_dataset(replace(CFG, seed=9), 10_000, vocab):
        assert vocab.unk_id not in s.caption.tokens
    assert vocab.size == 31
    assert vocab.tags == ["<pad>", *DEP_TAGS]
    assert set(COLORS) <= set(vocab.tokens)


# -- persistence --------------------------------------------------------------------

def test_dataset_roundtrip(tmp_path):
    data = generate_dataset(CFG, 100, grammar_vocabulary())
    save_dataset(data, tmp_path / "d.jsonl")
    assert load_dataset(tmp_path / "d.jsonl") == data


def test_empty_file_gives_empty_dataset(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_dataset(tmp_path / "e.jsonl") == []


def test_truncated_line_is_reported(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(generate_dataset(CFG, 10, grammar_vocabulary()), path)
    lines = path.read_text().splitlines()
    lines[6] = lines[6][: len(lines[6]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 7"):
        load_dataset(path)


def test_generation_is_a_function_of_seed_and_index():
    vocab = grammar_vocabulary()
    full = generate_dataset(CFG, 10, vocab)
    tail = generate_dataset(CFG, 4, vocab, offset=6)
    assert full[6:] == tail
    assert generate_dataset(replace(CFG, seed=1), 10, vocab) != full


def test_realize_caption_wraps_with_specials():
    vocab = grammar_vocabulary()
    p = pair_for(13)
    c = realize_caption(p, vocab)
    words, tags = caption_words(p)
    assert vocab.decode(c.tokens[1:-1]) == words
    assert vocab.decode_tags(c.dep_tags) == ["punct", *tags, "punct"]
    assert c.change_type == p.change.kind
