import numpy as np
import pytest

from fusionlab.core.depthprior import (CONTENT_DIM, SIGMA_BASE_CALIBRATED, ConfidenceHyperparams,
                                       ConfidenceNet, DepthBins, DepthDistribution, DepthExample, Query3D,
                                       _DepthBatch, confidence_loss_and_grad, domain_sigma, expected_depth,
                                       fuse_distributions, gaussian_bins, image_depth_distribution,
                                       lidar_depth_histogram, make_query2d, make_query3d, train_confidence)
from fusionlab.core.errors import ConfigError, DepthError, GeometryError, TrainingError, WeightsError
from fusionlab.core.geometry import project_point
from fusionlab.core.types import Box2D, Box3D, DomainName, DomainTag

BINS = DepthBins()


def random_distribution(rng, D=BINS.D):
    # every bin above the log floor
    p = rng.dirichlet(np.ones(D))
    p = 0.999 * p + 0.001 / D
    return DepthDistribution(p / p.sum())


class TestFusion:
    def test_identities(self):
        rng = np.random.default_rng(0)
        for _ in range(10000):
            d2, d3 = random_distribution(rng), random_distribution(rng)
            np.testing.assert_allclose(fuse_distributions(d2, d3, 1.0).probs, d2.probs, atol=1e-9)
            np.testing.assert_allclose(fuse_distributions(d2, d3, 0.0).probs, d3.probs, atol=1e-9)
            lam = rng.uniform()
            np.testing.assert_allclose(fuse_distributions(d2, d2, lam).probs, d2.probs, atol=1e-9)

    def test_output_is_a_distribution(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            fused = fuse_distributions(random_distribution(rng), random_distribution(rng), rng.uniform())
            assert np.all(fused.probs >= 0)
            assert fused.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_survives_zero_bins(self):
        fused = fuse_distributions(DepthDistribution.one_hot(BINS.D, 3),
                                   DepthDistribution.one_hot(BINS.D, 20), 0.5)
        assert np.all(np.isfinite(fused.probs))

    def test_rejects_lambda_out_of_range(self):
        d = DepthDistribution.uniform(BINS.D)
        with pytest.raises(DepthError):
            fuse_distributions(d, d, 1.5)

    def test_divergence_from_image_shrinks_with_lambda(self):
        rng = np.random.default_rng(3)
        lams = np.linspace(0.0, 1.0, 11)
        for _ in range(200):
            d2, d3 = random_distribution(rng), random_distribution(rng)
            kl = [float(np.sum(f * np.log(f / d2.probs)))
                  for f in (fuse_distributions(d2, d3, lam).probs for lam in lams)]
            assert all(b <= a + 1e-12 for a, b in zip(kl, kl[1:]))


class TestDistributions:
    def test_empty_frustum_is_uniform(self):
        assert lidar_depth_histogram([], BINS).is_uniform()

    def test_out_of_range_depths_ignored(self):
        assert lidar_depth_histogram([0.2, 80.0], BINS).is_uniform()

    def test_histogram_counts(self):
        d = lidar_depth_histogram([2.0, 2.5, 10.0, 10.2], BINS)
        assert d.probs[0] == 0.5
        assert d.probs[BINS.index_of(10.0)] == 0.5

    def test_domain_sigma_inflation_order(self):
        base = domain_sigma(2.0, DomainTag())
        rain = domain_sigma(2.0, DomainTag(DomainName.RAIN, 0.5))
        night = domain_sigma(2.0, DomainTag(DomainName.NIGHT, 0.5))
        assert base == 2.0
        assert night > rain > base

    def test_image_depth_error_calibration(self):
        errors = [abs(expected_depth(image_depth_distribution(20.0, SIGMA_BASE_CALIBRATED, DomainTag(),
                                                              BINS, seed), BINS) - 20.0)
                  for seed in range(2000)]
        assert 1.5 < np.mean(errors) < 2.1

    def test_image_depth_is_seeded(self):
        a = image_depth_distribution(15.0, 2.0, DomainTag(), BINS, 4)
        b = image_depth_distribution(15.0, 2.0, DomainTag(), BINS, 4)
        assert np.array_equal(a.probs, b.probs)


def random_examples(rng, n):
    examples = []
    for _ in range(n):
        gt = rng.uniform(5, 45)
        examples.append(DepthExample(random_distribution(rng), random_distribution(rng), gt))
    return examples


class TestConfidenceNet:
    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        net = ConfidenceNet.init(BINS.D, seed=3, hidden=(6, 5))
        net.params['W3'] = rng.normal(0, 0.5, size=net.params['W3'].shape)
        X = rng.uniform(0, 0.2, size=(7, 2 * BINS.D))
        w = rng.normal(size=7)
        _, cache = net.forward_batch(X)
        grads = net.backward_batch(cache, w)
        h = 1e-5
        for name, value in net.params.items():
            for idx in np.ndindex(value.shape):
                old = value[idx]
                value[idx] = old + h
                up = net.forward_batch(X)[0] @ w
                value[idx] = old - h
                down = net.forward_batch(X)[0] @ w
                value[idx] = old
                numeric = (up - down) / (2 * h)
                assert grads[name][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_loss_gradient_direction(self):
        rng = np.random.default_rng(5)
        net = ConfidenceNet.init(BINS.D, seed=1)
        net.params['W3'] = rng.normal(0, 0.3, size=net.params['W3'].shape)
        batch = _DepthBatch(random_examples(rng, 20), BINS)
        loss, grads = confidence_loss_and_grad(net, batch)
        step = ConfidenceNet(params={k: v - 1e-4 * grads[k] for k, v in net.params.items()})
        assert confidence_loss_and_grad(step, batch, with_grad=False)[0] <= loss

    def test_training_curve_never_increases(self):
        rng = np.random.default_rng(6)
        examples = []
        for _ in range(40):
            gt = rng.uniform(5, 45)
            # LiDAR exact, image off by several meters
            d3 = DepthDistribution.one_hot(BINS.D, BINS.index_of(gt))
            d2 = image_depth_distribution(gt, 4.0, DomainTag(), BINS, int(rng.integers(1 << 30)))
            examples.append(DepthExample(d2, d3, gt))
        _, curve = train_confidence(ConfidenceNet.init(BINS.D, seed=0), examples, BINS,
                                    ConfidenceHyperparams(epochs=60))
        assert all(b <= a for a, b in zip(curve, curve[1:]))
        assert curve[-1] < curve[0]

    def test_empty_training_set(self):
        with pytest.raises(TrainingError):
            train_confidence(ConfidenceNet.init(BINS.D), [], BINS)

    def test_skip_uniform_lidar(self):
        uniform = DepthExample(DepthDistribution.uniform(BINS.D), DepthDistribution.uniform(BINS.D), 10.0)
        with pytest.raises(TrainingError):
            train_confidence(ConfidenceNet.init(BINS.D), [uniform], BINS,
                             ConfidenceHyperparams(skip_uniform_lidar=True))

    def test_save_load(self, tmp_path):
        net = ConfidenceNet.init(BINS.D, seed=9)
        net.save(tmp_path / "net.json")
        loaded = ConfidenceNet.load(tmp_path / "net.json")
        for k, v in net.params.items():
            assert np.array_equal(loaded.params[k], v)

    def test_load_rejects_other_version(self, tmp_path):
        (tmp_path / "net.json").write_text('{"version": "other", "layers": {}}')
        with pytest.raises(WeightsError):
            ConfidenceNet.load(tmp_path / "net.json")

def oracle_lambda(examples):
    """Grid-searched lambda with the lowest mean depth error"""
    grid = np.linspace(0.0, 1.0, 21)
    errors = [np.mean([abs(expected_depth(fuse_distributions(e.d2, e.d3, lam), BINS) - e.gt_depth)
                       for e in examples]) for lam in grid]
    return float(grid[int(np.argmin(errors))])


def trained_mean_lambda(examples, epochs=80):
    net, curve = train_confidence(ConfidenceNet.init(BINS.D, seed=0), examples, BINS,
                                  ConfidenceHyperparams(epochs=epochs))
    lam, _ = net.forward_batch(_DepthBatch(examples, BINS).X)
    return float(lam.mean()), curve


class TestConfidenceDirection:
    # ground truth at bin centers so the one-hot LiDAR histogram carries no quantization error
    def test_exact_lidar_pulls_lambda_down(self):
        rng = np.random.default_rng(11)
        examples = []
        for k in range(2, 10):
            for _ in range(5):
                gt = float(BINS.centers[k])
                d2 = gaussian_bins(gt + rng.uniform(2.0, 6.0), 3.5, BINS)
                examples.append(DepthExample(d2, DepthDistribution.one_hot(BINS.D, k), gt))
        assert oracle_lambda(examples) < 0.5
        lam, curve = trained_mean_lambda(examples)
        assert lam < 0.5
        assert curve[-1] <= curve[0]

    def test_empty_frustum_pulls_lambda_up(self):
        examples = [DepthExample(gaussian_bins(float(BINS.centers[k]), 1.0, BINS),
                                 DepthDistribution.uniform(BINS.D), float(BINS.centers[k]))
                    for k in range(2, 10)]
        assert oracle_lambda(examples) > 0.5
        lam, curve = trained_mean_lambda(examples)
        assert lam > 0.5
        assert curve[-1] < curve[0]



class TestQueries:
    def test_2d_reference_point_on_the_ray(self, camera):
        box = Box2D(90.0, 80.0, 130.0, 120.0, score=0.8, class_id=1)
        image = image_depth_distribution(12.0, 2.0, DomainTag(), BINS, 0)
        q = make_query2d(box, camera, np.zeros((0, 4)), BINS, None, image)
        uv, depth = project_point(camera, q.ref_point)
        np.testing.assert_allclose(uv, box.center, atol=1e-9)
        assert depth == pytest.approx(expected_depth(q.depth_dist, BINS))
        assert q.lam == 1.0 and q.lidar_support == 0
        assert q.content.shape == (CONTENT_DIM,)

    def test_lidar_only_prior_lands_on_point_bin(self, camera):
        box = Box2D(90.0, 90.0, 110.0, 110.0)
        points = np.array([[0.0, 0.0, 20.2, 1.0], [0.01, 0.0, 20.4, 1.0]])
        image = DepthDistribution.uniform(BINS.D)
        q = make_query2d(box, camera, points, BINS, None, image, lam_override=0.0)
        assert q.lidar_support == 2
        assert q.ref_point[2] == pytest.approx(BINS.centers[BINS.index_of(20.2)], abs=1e-3)

    def test_3d_query_keeps_center(self):
        box = Box3D(center=[3.0, 4.0, 0.8], size=[4.5, 1.9, 1.6], yaw=0.3, score=0.7)
        q = make_query3d(box, BINS)
        assert np.array_equal(q.ref_point, box.center)
        assert q.content.shape == (CONTENT_DIM,)

    def test_3d_query_rejects_moved_reference(self):
        box = Box3D(center=[3.0, 4.0, 0.8], size=[4.5, 1.9, 1.6], yaw=0.3)
        with pytest.raises(GeometryError):
            Query3D(content=np.zeros(CONTENT_DIM), ref_point=np.array([3.0, 4.0, 1.0]), source_box=box)


class TestValidation:
    def test_bins_name_the_field(self):
        with pytest.raises(ConfigError) as e:
            DepthBins(D=1)
        assert e.value.field == "depth.n_bins"

    def test_sigma_base_names_the_field(self):
        with pytest.raises(ConfigError) as e:
            image_depth_distribution(10.0, 0.0, DomainTag(), BINS, 0)
        assert e.value.field == "depth.sigma_base"

    def test_distribution_must_sum_to_one(self):
        with pytest.raises(DepthError):
            DepthDistribution(np.full(BINS.D, 0.5))
