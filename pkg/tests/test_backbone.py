import numpy as np
import pytest

from acereloc.backbone import (BACKBONE_AUGMENT, HEAD_AUGMENT, AugmentConfig, BackboneTrainingConfig,
                               HandcraftedBackbone, LearnedBackbone, OracleBackbone, augment_view,
                               extract_features, load_backbone, save_backbone, train_backbone)
from acereloc.errors import EmptyScene, UnsupportedSize
from acereloc.features import View
from acereloc.geometry import Intrinsics, Pose, look_at, project_points
from acereloc.neural import BackboneNet
from acereloc.synth import generate_world, render_image

K = Intrinsics(525.0, 525.0, 320.0, 240.0, 640, 480)
SMALL = Intrinsics(100.0, 100.0, 40.0, 32.0, 80, 64)


@pytest.fixture(scope="module")
def textured():
    w = generate_world(2, 4000, 5.0)
    w.splat_size = 0.15
    pose = look_at([0.5, -6, 1], [0, 0, 0])
    return w, View("v", pose, K, render_image(w, pose, K))


def test_handcrafted_constant_image_is_uniform():
    fm = HandcraftedBackbone().extract(View("c", Pose(), K, np.full((480, 640), 0.3, np.float32)))
    flat = fm.data.reshape(-1, fm.channels)
    assert np.all(flat == flat[0])
    assert fm.data.shape == (60, 80, 64)


def test_handcrafted_unit_norm_and_offset_invariant(textured):
    _, view = textured
    bb = HandcraftedBackbone(out_dim=128)
    a = bb.extract(view)
    assert a.channels == 128
    assert np.allclose(np.linalg.norm(a.data, axis=-1), 1, atol=1e-5)
    b = bb.extract(view.replace(image=view.image + 0.2))
    assert np.allclose(a.data, b.data, atol=1e-5)


def test_handcrafted_rejects_low_dim_and_tiny_images():
    with pytest.raises(ValueError):
        HandcraftedBackbone(out_dim=32).fit()
    with pytest.raises(UnsupportedSize):
        HandcraftedBackbone().extract(View("t", Pose(), Intrinsics(5, 5, 2, 2, 4, 4), np.zeros((4, 4))))


def test_oracle_is_viewpoint_consistent(small_world):
    bb = OracleBackbone(small_world)
    a = bb.extract(View("a", look_at([0, -6, 1], [0, 0, 0]), K))
    b = bb.extract(View("b", look_at([1, -6, 1.5], [0, 0, 0]), K))
    da = {tuple(d) for d in a.data[a.valid]}
    db = {tuple(d) for d in b.data[b.valid]}
    shared = da & db
    assert len(shared) > 100
    world = {tuple(d) for d in small_world.descriptors}
    assert shared <= world


def test_learned_backbone_deterministic_and_roundtrip(tmp_path, textured):
    _, view = textured
    net = BackboneNet.init(16, rng=0)
    a = LearnedBackbone(net).extract(view)
    b = extract_features(view, LearnedBackbone(net))
    assert np.array_equal(a.data, b.data) and a.data.shape == (60, 80, 16)
    save_backbone(net, tmp_path / "bb.npz")
    c = LearnedBackbone(load_backbone(tmp_path / "bb.npz")).extract(view)
    assert np.array_equal(a.data, c.data)


def test_identity_augmentation_is_noop():
    v = View("v", look_at([0, -6, 1], [0, 0, 0]), K, np.zeros((480, 640), np.float32))
    out = augment_view(v, 0, AugmentConfig())
    assert np.array_equal(out.pose.as_matrix(), v.pose.as_matrix()) and out.intrinsics == K
    assert augment_view(v, 0, None) is v


def test_scale_augmentation_scales_intrinsics_and_pixels(rng):
    v = View("v", look_at([0, -6, 1], [0, 0, 0]), K)
    cfg = AugmentConfig(min_height=240, max_height=240)
    out = augment_view(v, rng, cfg)
    assert out.intrinsics.height == 240 and out.intrinsics.width == 320
    assert np.allclose(out.intrinsics.as_array(), K.as_array() * 0.5)
    pts = rng.uniform(-1, 1, (100, 3))
    a = project_points(K, v.pose.inverse().apply(pts))
    b = project_points(out.intrinsics, out.pose.inverse().apply(pts))
    assert np.allclose(b, a * 0.5, atol=1e-9)


def test_roll_rotates_pixels_about_principal_point(rng):
    v = View("v", look_at([0, -6, 1], [0, 0, 0]), K)
    cfg = AugmentConfig(max_rotation_deg=15.0)
    pts = rng.uniform(-2, 2, (100, 3))
    for _ in range(5):
        out = augment_view(v, rng, cfg)
        a = project_points(K, v.pose.inverse().apply(pts)) - [K.cx, K.cy]
        b = project_points(out.intrinsics, out.pose.inverse().apply(pts)) - [K.cx, K.cy]
        # recover the applied roll from the pose and compare with hand-rotated pixels
        rel = v.pose.rotation.T @ out.pose.rotation
        theta = np.arctan2(rel[0, 1], rel[0, 0])
        assert abs(np.degrees(theta)) <= 15.0
        c, s = np.cos(theta), np.sin(theta)
        assert np.allclose(b, a @ np.array([[c, s], [-s, c]]), atol=1e-6)


def _blob_image(k, center, sigma=2.0):
    jj, ii = np.meshgrid(np.arange(k.width) + 0.5, np.arange(k.height) + 0.5)
    return np.exp(-((jj - center[0]) ** 2 + (ii - center[1]) ** 2) / (2 * sigma ** 2)).astype(np.float32)


def _centroid(img):
    w = np.where(img > 0.05, img, 0.0)
    ii, jj = np.indices(img.shape)
    return np.array([(w * (jj + 0.5)).sum(), (w * (ii + 0.5)).sum()]) / w.sum()


@pytest.mark.parametrize("cfg", [AugmentConfig(240, 960, 15.0), AugmentConfig(240, 960, 40.0, rotation_3d=True)])
def test_image_augmentation_is_geometrically_consistent(cfg, rng):
    pose = look_at([0, -3, 0], [0, 0, 0])
    worst = 0.0
    for _ in range(25):
        cam = np.array([*rng.uniform(-0.1, 0.1, 2), 1.0]) * rng.uniform(2, 4)
        X = pose.apply(cam)
        px = project_points(SMALL, cam[None])[0]
        view = View("b", pose, SMALL, _blob_image(SMALL, px))
        out = augment_view(view, rng, cfg)
        new_px = project_points(out.intrinsics, out.pose.inverse().apply(X[None]))[0]
        k = out.intrinsics
        if not (10 < new_px[0] < k.width - 10 and 10 < new_px[1] < k.height - 10):
            continue
        scale = k.fx / SMALL.fx
        worst = max(worst, np.linalg.norm(_centroid(out.image) - new_px) / max(scale, 1.0))
    assert worst <= 0.5


def test_photometric_jitter_stays_in_range(textured):
    _, view = textured
    out = augment_view(view, 3, HEAD_AUGMENT)
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert out.mask is not None and out.mask.mean() > 0.5


def _tiny_scene(seed, n=6):
    w = generate_world(seed, 1500, 3.0)
    w.splat_size = 0.2
    views = []
    for i in range(n):
        a = 2 * np.pi * i / n
        pose = look_at([4 * np.cos(a), 4 * np.sin(a), 1], [0, 0, 0])
        views.append(View(f"s{seed}-{i}", pose, SMALL, render_image(w, pose, SMALL)))
    return views


def test_train_backbone_descends():
    cfg = BackboneTrainingConfig(steps=50, images_per_head=2, out_channels=16, head_width=32, head_layers=4,
                                 lr_min=1e-3, lr_max=3e-3, augment=AugmentConfig(), seed=0)
    net, heads, losses = train_backbone([_tiny_scene(0)], cfg)
    assert len(heads) == 1
    assert losses[-5:].mean() < losses[0]


def test_train_backbone_zero_lr_and_head_count():
    cfg = BackboneTrainingConfig(steps=3, images_per_head=1, out_channels=8, head_width=16, head_layers=4,
                                 lr_min=0.0, lr_max=0.0, augment=BACKBONE_AUGMENT, seed=1)
    net0 = BackboneNet.init(8, rng=5)
    before = [p.copy() for p in net0.params()]
    net, heads, _ = train_backbone([_tiny_scene(1, 3), _tiny_scene(2, 3)], cfg, net=net0)
    assert len(heads) == 2
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))
    assert sum(p.size for p in net.params()) == sum(p.size for p in BackboneNet.init(8, rng=0).params())
    with pytest.raises(EmptyScene):
        train_backbone([[]], cfg)
