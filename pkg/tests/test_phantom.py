import numpy as np
import pytest

from psoctseg.datamodel import load_record, read_manifest
from psoctseg.errors import InfeasibleGeometry
from psoctseg.metrics import ade
from psoctseg.phantom import (
    PhantomConfig,
    effective_class_means,
    generate,
    generate_dataset,
    perturb_labels,
)
from psoctseg.postprocess import extract_boundaries, verify_topology


def test_deterministic_given_seed():
    a = generate(PhantomConfig(seed=77))
    b = generate(PhantomConfig(seed=77))
    assert np.array_equal(a[0].channels, b[0].channels)
    assert np.array_equal(a[1].classes, b[1].classes)


def test_different_seeds_differ():
    a = generate(PhantomConfig(seed=1))
    b = generate(PhantomConfig(seed=2))
    assert not np.array_equal(a[1].classes, b[1].classes)


def test_zero_noise_nearest_mean_recovers_labels():
    config = PhantomConfig(seed=3, noise_level=0.0)
    image, labels, _ = generate(config)
    means = effective_class_means(config)  # (6, 3)
    pixels = image.channels.transpose(1, 2, 0)  # (R, A, 3)
    dist = ((pixels[:, :, None, :] - means[None, None, :, :]) ** 2).sum(axis=3)
    nearest = dist.argmin(axis=2).astype(np.uint8) + 1
    assert np.array_equal(nearest, labels.classes)


def test_topology_valid_over_many_configs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        cfg = PhantomConfig(seed=int(rng.integers(0, 2**31)),
                            noise_level=float(rng.uniform(0, 2)))
        _, labels, _ = generate(cfg)
        assert verify_topology(labels).all_valid


def test_class_populations_unbalanced(phantom_64):
    _, labels, _ = phantom_64
    counts = np.bincount(labels.classes.ravel(), minlength=7)[1:]
    assert counts[0] + counts[1] > counts[2:].sum()  # lumen+outside dominate


def test_infeasible_geometry():
    with pytest.raises(InfeasibleGeometry):
        generate(PhantomConfig(r_samples=16, a_lines=32,
                               lumen_radius_range=(10, 12),
                               intima_thickness_range=(4, 5),
                               media_thickness_range=(4, 5),
                               wedge_width_range=(3, 5),
                               seed=0))


class TestPerturbLabels:
    def test_severity_zero_is_identity(self, phantom_64):
        _, labels, _ = phantom_64
        out = perturb_labels(labels, 0.0, seed=9)
        assert np.array_equal(out.classes, labels.classes)

    def test_severity_one_displaces_boundaries(self, phantom_64):
        _, labels, _ = phantom_64
        out = perturb_labels(labels, 1.0, seed=9)
        orig = extract_boundaries(labels)["outer_lumen"]
        pert = extract_boundaries(out)["outer_lumen"]
        assert ade(pert, orig, mode="radial") > 0.5

    def test_outputs_always_topology_valid(self, phantom_64):
        _, labels, _ = phantom_64
        for seed in range(20):
            for severity in (0.1, 0.5, 1.0):
                out = perturb_labels(labels, severity, seed=seed)
                assert verify_topology(out).all_valid

    def test_severity_scales_displacement(self, phantom_64):
        _, labels, _ = phantom_64
        orig = extract_boundaries(labels)["outer_lumen"]

        def mean_disp(severity):
            vals = []
            for seed in range(5):
                p = extract_boundaries(perturb_labels(labels, severity, seed))["outer_lumen"]
                vals.append(ade(p, orig, mode="radial"))
            return np.mean(vals)

        assert mean_disp(1.0) > mean_disp(0.25)


def test_generate_dataset_layout(tmp_path):
    out = tmp_path / "ds"
    entries = generate_dataset(out, 12, seed=5, r_samples=32, a_lines=64,
                               frames_per_patient=3)
    assert len(entries) == 12
    assert read_manifest(out) == entries
    assert len({pid for _, pid in entries}) == 4
    image, labels, pid = load_record(out / entries[0][0])
    assert image.shape == (32, 64)
    assert labels is not None and pid == entries[0][1]


def test_generate_dataset_deterministic(tmp_path):
    e1 = generate_dataset(tmp_path / "a", 4, seed=8, r_samples=32, a_lines=64)
    e2 = generate_dataset(tmp_path / "b", 4, seed=8, r_samples=32, a_lines=64)
    for (n1, _), (n2, _) in zip(e1, e2):
        r1 = (tmp_path / "a" / n1).read_bytes()
        r2 = (tmp_path / "b" / n2).read_bytes()
        assert r1 == r2
