import numpy as np
import torch

from branchdit.branches import SPATIAL, SUBJECT
from branchdit.data import GLYPH, MANIFEST, edge_map, glyph_location, make_samples, read_dataset, write_dataset


def block_mean(a, f):
    h, w = a.shape
    return a.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def naive_edges(t):
    h, w = t.shape
    e = np.zeros_like(t)
    for i in range(h):
        for j in range(w):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if 0 <= a < h and 0 <= b < w and t[a, b] != t[i, j]:
                    e[i, j] = 1.0
    return e


def test_spatial_condition_is_downsampled_edge_map():
    for s in make_samples(SPATIAL, 8, 5):
        target = s.target.pixels[0].numpy()
        assert set(np.unique(target)) <= {0.0, 1.0}
        assert np.array_equal(edge_map(target), naive_edges(target))
        ref = block_mean(naive_edges(target), 2)
        assert np.abs(s.condition.pixels[0].numpy() - ref).max() < 1e-12


def test_spatial_prompt_encodes_colours():
    for s in make_samples(SPATIAL, 8, 1):
        fg, bg = s.prompt
        assert fg in (0, 1) and bg - 2 in (0, 1) and fg != bg - 2


def test_subject_sample_places_glyph():
    for s in make_samples(SUBJECT, 8, 2):
        (token,) = s.prompt
        r, c = glyph_location(token - 8, 32)
        cond = s.condition.pixels[0]
        o = (16 - GLYPH) // 2
        assert torch.equal(s.target.pixels[0, r:r + GLYPH, c:c + GLYPH], cond[o:o + GLYPH, o:o + GLYPH])
        assert float(s.target.pixels.sum()) == float(cond.sum())


def test_same_seed_same_samples_different_seed_differs():
    a, b, c = (make_samples(SPATIAL, 3, s) for s in (7, 7, 8))
    assert all(torch.equal(x.target.pixels, y.target.pixels) for x, y in zip(a, b))
    assert any(not torch.equal(x.target.pixels, y.target.pixels) for x, y in zip(a, c))


def test_dataset_roundtrip(tmp_path):
    samples = make_samples(SUBJECT, 4, 0)
    write_dataset(samples, tmp_path)
    back = read_dataset(tmp_path)
    assert [s.prompt for s in back] == [s.prompt for s in samples]
    for s, r in zip(samples, back):
        assert torch.equal(s.target.pixels, r.target.pixels)  # binary images survive 8-bit files exactly


def test_empty_dataset(tmp_path):
    write_dataset([], tmp_path / "d")
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == [MANIFEST]
    assert (tmp_path / "d" / MANIFEST).read_text() == ""
    assert read_dataset(tmp_path / "d") == []
