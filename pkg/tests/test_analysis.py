import numpy as np
import pytest
import torch
from PIL import Image

from attpose import analysis
from attpose.data import PoseDataset, PreprocessConfig, SyntheticScene, generate_synthetic_scene
from attpose.geometry import Trajectory
from attpose.model import EncoderConfig, PoseNetwork
from attpose.train_eval import evaluate

PRE = PreprocessConfig(40, 32)


def small_model(seed=0):
    torch.manual_seed(seed)
    return PoseNetwork(EncoderConfig("tiny-residual", feature_dim=32, attention_ratio=4, input_size=32,
                                     width=8, dropout_rate=0.0)).eval()


@pytest.fixture(scope="module")
def frames():
    samples = generate_synthetic_scene(12, seed=2)
    ds = PoseDataset(samples, PRE)
    return samples, torch.stack([ds.image(i) for i in range(len(ds))])


class TestSaliency:
    def test_shape_and_range(self, frames):
        _, x = frames
        sal = analysis.saliency(small_model(), x[0]).values
        assert sal.shape == (32, 32)
        assert (sal >= 0).all() and sal.max() == pytest.approx(1.0)

    def test_constant_output_model_all_zero(self, frames):
        _, x = frames
        model = small_model()
        model.regressor.zero_heads()
        assert not analysis.saliency(model, x[3]).values.any()

    def test_leaves_weights_untouched(self, frames):
        _, x = frames
        model = small_model()
        before = analysis.weights_checksum(model)
        analysis.saliency(model, x[1])
        assert analysis.weights_checksum(model) == before
        assert all(p.grad is None for p in model.parameters())

    def test_text_grid(self, frames, tmp_path):
        _, x = frames
        sal = analysis.saliency(small_model(), x[0])
        back = np.loadtxt(sal.save_text(tmp_path / "s.txt"))
        np.testing.assert_allclose(back, sal.values, atol=1e-8)


class TestFeatureDistances:
    def test_anchor_zero(self, frames):
        _, x = frames
        prof = analysis.feature_distances(small_model(), x, 4)
        assert prof.distances[4] == 0.0 and (prof.distances >= 0).all()

    def test_duplicated_frames(self, frames):
        _, x = frames
        dup = x[5:6].repeat(7, 1, 1, 1)
        for post in (True, False):
            assert not analysis.feature_distances(small_model(), dup, 2, post).distances.any()

    def test_symmetric(self, frames):
        _, x = frames
        m = small_model()
        assert analysis.feature_distances(m, x, 1).distances[6] == pytest.approx(
            analysis.feature_distances(m, x, 6).distances[1], abs=1e-12)

    def test_anchor_out_of_range(self, frames):
        _, x = frames
        with pytest.raises(IndexError):
            analysis.feature_distances(small_model(), x, 12)

    def test_path_distance(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [1, 2, 0]], float)
        np.testing.assert_allclose(analysis.path_distance(pts, 1), [1, 0, 2])


def test_spearman_against_scipy():
    from scipy.stats import spearmanr

    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.integers(0, 10, 30)
        b = a + rng.normal(0, 3, 30)
        assert analysis.spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)


class TestTrajectoryPlot:
    def traj(self, pts):
        pts = np.asarray(pts, float)
        return Trajectory(np.arange(len(pts), dtype=float), pts, np.tile([1.0, 0, 0, 0], (len(pts), 1)))

    def test_identical(self, tmp_path):
        t = self.traj(np.random.default_rng(0).standard_normal((10, 3)))
        lines = analysis.trajectory_plot(t, t, tmp_path / "t.png")
        assert np.array_equal(lines["ground_truth"], lines["predicted"])
        assert Image.open(tmp_path / "t.png").size[0] > 0

    def test_constant_offset(self, tmp_path):
        gt = self.traj([[i, 0, 0] for i in range(5)])
        pr = self.traj([[i, 0.5, 0] for i in range(5)])
        lines = analysis.trajectory_plot(pr, gt, tmp_path / "t.png")
        np.testing.assert_allclose(lines["predicted"] - lines["ground_truth"], [[0, 0.5]] * 5)

    def test_length_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            analysis.trajectory_plot(self.traj(np.zeros((3, 3))), self.traj(np.zeros((4, 3))), tmp_path / "t.png")


@pytest.mark.slow
class TestTrainedModel:
    def test_distance_profile_tracks_path(self, toy_run):
        ckpt, samples = toy_run["ckpt"], toy_run["samples"]
        ds = PoseDataset(samples, ckpt.preprocess)
        x = torch.stack([ds.image(i) for i in range(len(ds))])
        prof = analysis.feature_distances(ckpt.build_model(), x, 0)
        rho = analysis.spearman(prof.distances, analysis.path_distance([s.pose.p for s in samples], 0))
        assert rho > 0.8

    def test_trajectory_vertices_match_report(self, toy_run, tmp_path):
        report = evaluate(toy_run["ckpt"], toy_run["samples"])
        ts = np.arange(len(report.frame_indices), dtype=float)
        lines = analysis.trajectory_plot(Trajectory(ts, report.pred_positions, report.pred_quats),
                                         Trajectory(ts, report.gt_positions, report.gt_quats), tmp_path / "t.png")
        assert (tmp_path / "t.png").is_file()
        np.testing.assert_array_equal(lines["predicted"], report.pred_positions[:, :2])
        np.testing.assert_array_equal(lines["ground_truth"], report.gt_positions[:, :2])

    def test_saliency_concentrates_on_textured_patch(self, single_region_run):
        ckpt, samples = single_region_run["ckpt"], single_region_run["samples"]
        model = ckpt.build_model()
        ds = PoseDataset(samples, ckpt.preprocess)
        scene = SyntheticScene(seed=0, texture_mode="single_region")
        crop = ckpt.preprocess.crop
        h, w = samples[0].pixels.shape[:2]
        top, left = (h - crop) // 2, (w - crop) // 2
        mass, area = [], []
        for i, s in enumerate(samples):
            _, mask = scene.render(s.pose, return_mask=True)
            mask = mask[top:top + crop, left:left + crop]
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            box = np.zeros_like(mask)
            box[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = True
            sal = analysis.saliency(model, ds.image(i)).values
            mass.append(sal[box].sum() / sal.sum())
            area.append(box.mean())
        mass, area = np.array(mass), np.array(area)
        # the patch fills at least half the view: most saliency lies on it
        assert mass[area >= 0.5].min() >= 0.7
        # anywhere it is visible, saliency favours it beyond its share of the image
        assert np.mean(mass > area) >= 0.95
