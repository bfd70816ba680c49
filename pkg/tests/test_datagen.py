import itertools

import numpy as np
import pytest

from fedod import datagen
from fedod.boxkit import iou_matrix
from fedod.datagen import DomainSpec


@pytest.fixture(scope="module")
def default_bench():
    return datagen.build_benchmark(0)


@pytest.fixture(scope="module")
def small_bench():
    return datagen.build_benchmark(3, server_train=40, server_test=10, client_train=12, client_test=8)


def test_zero_objects_give_pure_background():
    spec = DomainSpec("empty", (0.3, 0.3, 0.3), 0.05, {0: 1.0}, object_count_range=(0, 0))
    scene = datagen.render_scene(spec, np.random.default_rng(0))
    assert len(scene.ground_truth) == 0
    assert scene.image.shape == (3, 64, 64)
    assert abs(scene.image.mean() - 0.3) < 0.01


def test_fixed_seed_is_bit_identical():
    a = datagen.render_scene(datagen.HARBOR_DOMAIN, np.random.default_rng(5))
    b = datagen.render_scene(datagen.HARBOR_DOMAIN, np.random.default_rng(5))
    assert np.array_equal(a.image, b.image) and a.ground_truth == b.ground_truth


def test_class_frequencies_within_three_sigma():
    spec = DomainSpec("uniform", (0.3, 0.3, 0.3), 0.05, dict.fromkeys(range(5), 1.0), object_count_range=(1, 1))
    rng = np.random.default_rng(11)
    counts = np.zeros(5)
    for _ in range(1000):
        g = datagen.render_scene(spec, rng).ground_truth
        counts += np.bincount(g.labels, minlength=5)
    n = counts.sum()
    sigma = np.sqrt(n * 0.2 * 0.8)
    assert n >= 990  # placement of a single object essentially never fails
    assert (np.abs(counts - n / 5) <= 3 * sigma).all()


def test_scene_invariants():
    rng = np.random.default_rng(2)
    for spec in (datagen.SERVER_DOMAIN, datagen.CITY_DOMAIN, datagen.HARBOR_DOMAIN):
        for _ in range(50):
            s = datagen.render_scene(spec, rng)
            g = s.ground_truth
            lo, hi = spec.object_count_range
            assert len(g) <= hi
            assert (g.boxes >= 0).all() and (g.boxes <= 1).all()
            assert (g.scores == 1.0).all()
            assert set(g.labels) <= set(spec.class_palette)
            if len(g) > 1:
                ious = iou_matrix(g.boxes, g.boxes)
                np.fill_diagonal(ious, 0)
                assert ious.max() <= datagen.MAX_PAIR_IOU + 1e-12
            for box in g.boxes:
                x1, y1, x2, y2 = (box * 64).round().astype(int)
                patch = s.image[:, y1:y2, x1:x2].mean(axis=(1, 2))
                assert np.abs(patch - np.asarray(spec.background_mean)).max() > 0.1


@pytest.mark.parametrize("kw", [{"class_priors": {}}, {"size_range": (0.0, 0.2)}, {"size_range": (0.2, 0.6)}])
def test_domain_spec_validation(kw):
    args = {"domain_id": "x", "background_mean": (0.1, 0.1, 0.1), "background_noise": 0.01, "class_priors": {0: 1.0}}
    args.update(kw)
    with pytest.raises(ValueError):
        DomainSpec(**args)


def test_default_benchmark_counts_and_exclusivity(default_bench):
    b = default_bench
    assert len(b.server_train) == 2000 and len(b.server_test) == 400
    assert b.client_ids == [1, 2, 3, 4]
    assert all(len(b.client_train[c]) == 150 and len(b.client_test[c]) == 100 for c in b.client_ids)
    restricted = [b.server_train, b.server_test] + [b.client_train[c] for c in (1, 2)] + [b.client_test[c] for c in (1, 2)]
    for split in restricted:
        hist = split.class_histogram()
        assert hist[3] == 0 and hist[4] == 0, split.name
    assert (b.client_train[3].class_histogram()[3:] > 0).all()
    assert len(b.union_test()) == 400 + 4 * 100


def test_client_pairs_share_domains_and_backgrounds_differ(default_bench):
    b = default_bench
    dom = {c: b.client_train[c].domain_id for c in b.client_ids}
    assert dom[1] == dom[2] != dom[3] == dom[4] != "server"
    means = {d: np.mean(s.background_mean) for d, s in b.domains.items()}
    for x, y in itertools.combinations(means, 2):
        assert abs(means[x] - means[y]) >= 0.15, (x, y)


def test_same_seed_same_checksums():
    a = datagen.build_benchmark(7, 20, 5, 6, 4)
    b = datagen.build_benchmark(7, 20, 5, 6, 4)
    c = datagen.build_benchmark(8, 20, 5, 6, 4)
    sums = lambda bench: {k: s.checksum() for k, s in bench.splits().items()}  # noqa: E731
    assert sums(a) == sums(b)
    assert sums(a) != sums(c)


def test_benchmark_round_trip(tmp_path, small_bench):
    manifest = datagen.save_benchmark(small_bench, tmp_path / "data")
    back = datagen.load_benchmark(tmp_path / "data")
    assert back.seed == small_bench.seed
    for name, split in small_bench.splits().items():
        other = back.splits()[name]
        assert other.checksum() == split.checksum()
        assert other.domain_id == split.domain_id
    assert back.domains == small_bench.domains
    assert manifest["splits"]["server_train"]["count"] == 40


def test_corrupted_split_is_detected(tmp_path, small_bench):
    datagen.save_benchmark(small_bench, tmp_path / "data")
    csv_path = tmp_path / "data" / "client_1_test" / "boxes.csv"
    csv_path.write_text(csv_path.read_text().replace("0.", "0.1", 1))
    with pytest.raises(ValueError):
        datagen.load_benchmark(tmp_path / "data")
    with pytest.raises(FileNotFoundError):
        datagen.load_benchmark(tmp_path / "nowhere")


def test_subset_keeps_alignment(small_bench):
    s = small_bench.server_train.subset([3, 1])
    assert np.array_equal(s.images[0], small_bench.server_train.images[3])
    assert s.ground_truth[1] == small_bench.server_train.ground_truth[1]
