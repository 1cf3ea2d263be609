import math

import numpy as np

from ckbsim.envsense import render_for_pose, roi_semantic_vector
from ckbsim.pipeline import channel_scale, generate_dataset
from ckbsim.raytrace import ArrayGeometry, link_channel
from ckbsim.scene import build_scene, sample_cu_positions, small_config


def test_manifest(small_dataset):
    samples, manifest = small_dataset
    assert manifest.sample_count == len(samples) == 24
    assert manifest.resolution == (32, 32)
    assert [s.index for s in samples] == list(range(24))
    assert math.log2(manifest.c_h) == round(math.log2(manifest.c_h))


def test_sample_consistency(small_dataset):
    samples, manifest = small_dataset
    scene = build_scene(small_config(), 3)
    poses = sample_cu_positions(scene, 24)
    s = samples[7]
    _, channel = link_channel(scene, scene.bs, poses[7], ArrayGeometry.horizontal(),
                              ArrayGeometry.horizontal())
    assert np.array_equal(s.H, channel.entries.astype(np.complex64))
    label_map = render_for_pose(scene, poses, 7, 32)
    assert np.array_equal(s.labels, label_map.labels)
    assert np.array_equal(s.j_po, roi_semantic_vector(label_map, s.d_r, 0.01).j_po)
    assert np.allclose(s.cu_pos, poses[7].position)
    assert s.descriptor.shape == (8, 8, 29)


def test_deterministic(small_dataset):
    samples, manifest = small_dataset
    again, man2 = generate_dataset(small_config(), n=24, seed=3, resolution=32)
    assert man2 == manifest
    assert all(a.equals(b) for a, b in zip(samples, again))


def test_channel_scale():
    rng = np.random.default_rng(0)
    hs = [3e-5 * (rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16)))
          for _ in range(50)]
    c = channel_scale(hs)
    assert c == 2.0 ** -15  # std 3e-5 -> nearest power of two
    assert channel_scale([np.zeros((2, 2))]) == 1.0
