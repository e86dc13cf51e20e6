"""Scene generator: exact GT flow, warp consistency, shifts, splits."""

import json
import math
import os

import numpy as np
import numpy.testing as npt
import pytest

from pseudoflow.flowcore import warp_backward
from pseudoflow.synthdata import (
    SPLIT_NAMES,
    DegenerateSceneError,
    DomainShift,
    GenConfig,
    LabeledPair,
    LayerSpec,
    SceneSpec,
    apply_shift,
    build_splits,
    gen_pair,
    load_dataset,
    make_pair,
    random_scene,
    split_seeds,
    texture,
    write_dataset,
)


def _translation_scene(tx, ty, seed=5, size=48):
    layer = LayerSpec(tx=tx, ty=ty, tex_seed=seed * 7 + 1)
    return SceneSpec(seed=seed, height=size, width=size, layers=(layer,),
                     max_disp=8.0)


# ---------------------------------------------------------------------------
# closed-form flow


def test_pure_translation_yields_constant_flow():
    spec = _translation_scene(3.25, -1.5)
    pair = gen_pair(spec)
    npt.assert_array_equal(pair.flow[..., 0], 3.25)
    npt.assert_array_equal(pair.flow[..., 1], -1.5)


def test_rotation_flow_matches_similarity_transform():
    theta, scale = 0.1, 1.05
    layer = LayerSpec(tx=1.0, ty=-0.5, theta=theta, scale=scale, tex_seed=3)
    spec = SceneSpec(seed=1, height=32, width=32, layers=(layer,))
    pair = gen_pair(spec)
    cx = cy = 16.0
    ct, st = math.cos(theta), math.sin(theta)
    for (y, x) in [(0, 0), (0, 31), (31, 0), (15, 20)]:
        dx, dy = x - cx, y - cy
        qx = cx + 1.0 + scale * (ct * dx - st * dy)
        qy = cy - 0.5 + scale * (st * dx + ct * dy)
        npt.assert_allclose(pair.flow[y, x], [qx - x, qy - y], atol=1e-12)


def test_translation_warp_is_exact_on_interior():
    # with a pure integer translation the two frames are shifted copies
    spec = _translation_scene(4.0, 2.0)
    pair = gen_pair(spec)
    warped, _ = warp_backward(pair.img2, pair.flow)
    npt.assert_allclose(warped[pair.mask], pair.img1[pair.mask], atol=1e-12)


def test_warp_consistency_subpixel_motion():
    errs = []
    for seed in range(10):
        pair = gen_pair(random_scene(seed, height=64, width=64, max_disp=8.0))
        warped, _ = warp_backward(pair.img2, pair.flow)
        errs.append(float(np.abs(warped - pair.img1)[pair.mask].mean()))
    assert max(errs) < 0.02, errs


def test_mask_erodes_occlusion_boundaries():
    # moving foreground over moving background must invalidate pixels whose
    # target lands under (or at the silhouette of) another layer
    spec = random_scene(12, n_layers=3)
    pair = gen_pair(spec)
    assert bool((~pair.mask).any())
    assert 0.3 < pair.mask.mean() <= 1.0


def test_occlusion_fraction_grows_with_layers():
    def occ(n):
        vals = []
        for seed in range(30):
            pair = gen_pair(random_scene(seed, n_layers=n))
            vals.append(1.0 - pair.mask.mean())
        return float(np.mean(vals))

    assert occ(1) < occ(2) < occ(3)


def test_single_layer_when_occlusion_disabled():
    spec = random_scene(3, n_layers=3, occlusion=False)
    assert len(spec.effective_layers) == 1
    pair = gen_pair(spec)
    # the single background layer leaves no interior occlusions
    inb = pair.flow[..., 0] + np.arange(spec.width)[None, :]
    assert pair.mask.sum() > 0.8 * pair.mask.size or inb.max() > spec.width - 1


def test_determinism_bit_identical():
    a = gen_pair(random_scene(77))
    b = gen_pair(random_scene(77))
    npt.assert_array_equal(a.img1, b.img1)
    npt.assert_array_equal(a.img2, b.img2)
    npt.assert_array_equal(a.flow, b.flow)
    npt.assert_array_equal(a.mask, b.mask)


def test_texture_is_translation_covariant():
    # continuous texture: value at (x+d) in frame space equals shifted eval
    xs = np.linspace(0, 40, 64)
    ys = np.linspace(0, 40, 64)
    t1 = texture(xs, ys, seed=9)
    t2 = texture(xs + 13.37, ys, seed=9)
    t3 = texture(xs + 13.37, ys, seed=9)
    npt.assert_array_equal(t2, t3)
    assert not np.allclose(t1, t2)
    assert t1.min() >= 0.0 and t1.max() <= 1.0


# ---------------------------------------------------------------------------
# degenerate scenes


def test_degenerate_scene_errors():
    with pytest.raises(DegenerateSceneError):
        SceneSpec(seed=0, layers=())
    with pytest.raises(DegenerateSceneError):
        LayerSpec(tx=99.0, ty=0.0).validate(True, max_disp=8.0)
    with pytest.raises(DegenerateSceneError):
        LayerSpec(tx=0.0, ty=0.0, scale=0.5).validate(True, max_disp=8.0)
    with pytest.raises(DegenerateSceneError):
        LayerSpec(tx=0.0, ty=0.0, rx=0.0, ry=5.0).validate(False, max_disp=8.0)
    with pytest.raises(DegenerateSceneError):
        SceneSpec(seed=0, layers=(LayerSpec(tx=0, ty=0),) * 4)


def test_random_scene_respects_bounds():
    for seed in range(40):
        spec = random_scene(seed, max_disp=8.0)
        for i, layer in enumerate(spec.layers):
            assert abs(layer.tx) <= 8.0 and abs(layer.ty) <= 8.0
            assert 0.8 <= layer.scale <= 1.25
            if i > 0:
                assert layer.rx > 0 and layer.ry > 0


# ---------------------------------------------------------------------------
# domain shift


def test_identity_shift_returns_equal_copy():
    pair = gen_pair(random_scene(21))
    out = apply_shift(pair, DomainShift(), seed=21)
    assert out is not pair
    npt.assert_array_equal(out.img1, pair.img1)
    npt.assert_array_equal(out.flow, pair.flow)


def test_shift_noise_magnitude_folded_normal():
    # |N(0, sigma)| has mean sigma * sqrt(2/pi)
    sigma = 0.05
    pair = LabeledPair(img1=0.5 * np.ones((96, 96)),
                       img2=0.5 * np.ones((96, 96)),
                       flow=np.zeros((96, 96, 2)),
                       mask=np.ones((96, 96), bool))
    shifted = apply_shift(pair, DomainShift(noise_sigma=sigma), seed=4)
    observed = np.abs(shifted.img1 - 0.5).mean()
    expected = sigma * math.sqrt(2.0 / math.pi)
    assert abs(observed - expected) < 0.1 * expected


def test_shift_leaves_labels_untouched():
    pair = gen_pair(random_scene(33))
    out = apply_shift(pair, DomainShift(noise_sigma=0.05, gamma=1.3), seed=33)
    npt.assert_array_equal(out.flow, pair.flow)
    npt.assert_array_equal(out.mask, pair.mask)
    assert not np.array_equal(out.img1, pair.img1)


def test_shift_gamma_darkens_midtones():
    pair = LabeledPair(img1=0.5 * np.ones((8, 8)), img2=0.5 * np.ones((8, 8)),
                       flow=np.zeros((8, 8, 2)), mask=np.ones((8, 8), bool))
    out = apply_shift(pair, DomainShift(gamma=1.3), seed=0)
    npt.assert_allclose(out.img1, 0.5 ** 1.3, atol=1e-12)


def test_shift_determinism():
    pair = gen_pair(random_scene(8))
    s = DomainShift(noise_sigma=0.05, gamma=1.3)
    a = apply_shift(pair, s, seed=8)
    b = apply_shift(pair, s, seed=8)
    npt.assert_array_equal(a.img1, b.img1)
    c = apply_shift(pair, s, seed=9)
    assert not np.array_equal(a.img1, c.img1)


def test_shift_validation():
    with pytest.raises(ValueError):
        DomainShift(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        DomainShift(gamma=0.0)


# ---------------------------------------------------------------------------
# splits


def _tiny_cfg(seed=0):
    return GenConfig(root_seed=seed, height=32, width=32, max_disp=4.0,
                     n_source=3, n_target_train=2, n_target_unlabeled=4,
                     n_target_test=2,
                     shift=DomainShift(noise_sigma=0.05, gamma=1.3))


def test_split_seeds_disjoint_across_splits_and_roots():
    cfg = GenConfig(root_seed=1)
    seeds = split_seeds(cfg)
    all_seeds = [s for name in SPLIT_NAMES for s in seeds[name]]
    assert len(all_seeds) == len(set(all_seeds))
    other = split_seeds(GenConfig(root_seed=2))
    other_all = {s for name in SPLIT_NAMES for s in other[name]}
    assert not other_all.intersection(all_seeds)


def test_split_sizes_and_shift_application():
    cfg = _tiny_cfg()
    splits = build_splits(cfg)
    for name in SPLIT_NAMES:
        assert len(splits[name]) == cfg.sizes()[name]
    # source pairs are clean; target pairs get the photometric shift
    src = make_pair(cfg, "source", split_seeds(cfg)["source"][0])
    clean = gen_pair(random_scene(split_seeds(cfg)["source"][0],
                                  height=32, width=32, max_disp=4.0))
    npt.assert_array_equal(src.img1, clean.img1)
    tt_seed = split_seeds(cfg)["target_test"][0]
    shifted = make_pair(cfg, "target_test", tt_seed)
    raw = gen_pair(random_scene(tt_seed, height=32, width=32, max_disp=4.0))
    assert not np.array_equal(shifted.img1, raw.img1)
    npt.assert_array_equal(shifted.flow, raw.flow)


def test_dataset_write_load_round_trip(tmp_path):
    cfg = _tiny_cfg(seed=3)
    root = str(tmp_path / "ds")
    write_dataset(cfg, root)
    manifest = json.load(open(os.path.join(root, "manifest.json")))
    assert manifest["splits"] == {n: cfg.sizes()[n] for n in SPLIT_NAMES}
    ds = load_dataset(root)
    mem = build_splits(cfg)
    for name in SPLIT_NAMES:
        assert len(ds[name]) == len(mem[name])
        # images survive 8-bit quantization; flow is float32-exact
        npt.assert_allclose(ds[name][0].img1, mem[name][0].img1,
                            atol=0.5 / 255.0 + 1e-9)
        npt.assert_allclose(ds[name][0].flow,
                            mem[name][0].flow.astype(np.float32), atol=0)
        npt.assert_array_equal(ds[name][0].mask, mem[name][0].mask)


def test_dataset_regen_is_byte_identical(tmp_path):
    cfg = _tiny_cfg(seed=4)
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    write_dataset(cfg, a)
    write_dataset(cfg, b)
    for dirpath, _, files in os.walk(a):
        rel = os.path.relpath(dirpath, a)
        for f in sorted(files):
            pa = os.path.join(dirpath, f)
            pb = os.path.join(b, rel, f)
            assert open(pa, "rb").read() == open(pb, "rb").read(), pa


def test_parallel_split_build_matches_sequential():
    cfg = _tiny_cfg(seed=5)
    seq = build_splits(cfg, threads=1)
    par = build_splits(cfg, threads=3)
    for name in SPLIT_NAMES:
        for p, q in zip(seq[name], par[name]):
            npt.assert_array_equal(p.img1, q.img1)
            npt.assert_array_equal(p.flow, q.flow)
