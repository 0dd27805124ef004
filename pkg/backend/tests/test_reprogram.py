import numpy as np
import pytest

from services.autograd import ShapeError, Tape, Tensor, cosine_similarity, sum_
from services.reprogram import (
    PaddingParams,
    crop_and_pad_train,
    expand_and_pad_infer,
    pad_raw,
    padding_similarity_curve,
    score_matrix,
    trial_score,
)
from utils import crop_waveform


def _params(values, k: int = 1) -> PaddingParams:
    return PaddingParams(values=Tensor(np.asarray(values, dtype=float), requires_grad=True), num_segments=k)


class TestPadRaw:
    def test_even_split(self):
        out = pad_raw(Tensor([1.0, 2.0, 3.0]), Tensor([9.0, 8.0]))
        np.testing.assert_array_equal(out.samples.data, [9, 1, 2, 3, 8])
        assert (out.left_len, out.right_len, out.source_len) == (1, 1, 3)

    def test_odd_split(self):
        out = pad_raw(Tensor([5.0]), Tensor([7.0, 6.0, 4.0]))
        np.testing.assert_array_equal(out.samples.data, [7, 5, 6, 4])
        assert (out.left_len, out.right_len) == (1, 2)

    def test_single_sample_padding_goes_right(self):
        out = pad_raw(Tensor([5.0, 5.0]), Tensor([1.0]))
        np.testing.assert_array_equal(out.samples.data, [5, 5, 1])

    def test_empty_padding_returns_input(self):
        x = Tensor([1.0, 2.0])
        out = pad_raw(x, Tensor(np.zeros(0)))
        assert out.samples is x
        assert out.pad_len == 0

    def test_length_law(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            t, n = int(rng.integers(1, 50)), int(rng.integers(0, 40))
            x, w = rng.normal(size=t), rng.normal(size=n)
            out = pad_raw(Tensor(x), Tensor(w))
            assert out.samples.shape == (t + n,)
            assert out.left_len == n // 2 and out.right_len == n - n // 2
            np.testing.assert_array_equal(out.samples.data[:n // 2], w[:n // 2])
            np.testing.assert_array_equal(out.samples.data[n // 2:n // 2 + t], x)
            np.testing.assert_array_equal(out.samples.data[n // 2 + t:], w[n // 2:])

    def test_two_second_waveform(self):
        assert pad_raw(Tensor(np.zeros(32000)), Tensor(np.zeros(3200))).samples.shape == (35200,)

    def test_gradient_flows_into_padding(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_(pad_raw(Tensor([3.0]), w).samples * Tensor([10.0, 20.0, 30.0]))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [10.0, 30.0])

    def test_rejects_matrix_input(self):
        with pytest.raises(ShapeError):
            pad_raw(Tensor(np.zeros((2, 3))), Tensor([1.0]))


class TestPaddingParams:
    def test_rejects_indivisible_length(self):
        with pytest.raises(ValueError, match="not divisible"):
            PaddingParams.create(10, 3)

    def test_rejects_zero_segments(self):
        with pytest.raises(ValueError):
            PaddingParams.create(10, 0)

    def test_zero_length_is_baseline(self):
        params = PaddingParams.create(0, 1)
        assert params.total_len == 0 and params.segment_len == 0
        assert not params.values.requires_grad

    def test_gaussian_init(self):
        params = PaddingParams.create(20000, 2, init_std=1e-3, rng=np.random.default_rng(0))
        assert params.values.requires_grad
        assert np.std(params.values.data) == pytest.approx(1e-3, rel=0.05)
        assert params.segment_len == 10000


class TestCropAndPadTrain:
    def test_crop_example(self):
        params = _params(np.arange(12.0), k=3)
        out = crop_and_pad_train(Tensor([100.0, 101.0]), params, np.random.default_rng(0), offset=3)
        np.testing.assert_array_equal(out.samples.data, [3, 4, 100, 101, 5, 6])
        assert out.crop_offset == 3

    def test_gradient_support_is_cropped_slice(self):
        params = _params(np.arange(12.0), k=3)
        with Tape() as tape:
            out = crop_and_pad_train(Tensor([100.0, 101.0]), params, np.random.default_rng(0), offset=3)
            loss = sum_(out.samples * out.samples)
        tape.backward(loss)
        support = np.flatnonzero(params.values.grad)
        np.testing.assert_array_equal(support, [3, 4, 5, 6])

    def test_single_segment_uses_whole_padding_without_drawing(self):
        params = _params([1.0, 2.0, 3.0, 4.0], k=1)
        rng = np.random.default_rng(7)
        state = rng.bit_generator.state
        out = crop_and_pad_train(Tensor([0.5]), params, rng)
        assert rng.bit_generator.state == state
        assert out.crop_offset == 0
        np.testing.assert_array_equal(out.samples.data, pad_raw(Tensor([0.5]), params.values).samples.data)

    def test_offsets_cover_range(self):
        params = _params(np.arange(12.0), k=3)
        rng = np.random.default_rng(3)
        offsets = {crop_and_pad_train(Tensor([0.0]), params, rng).crop_offset for _ in range(300)}
        assert offsets == set(range(9))

    def test_two_copies_touch_half_the_parameters(self):
        params = PaddingParams.create(8, 2, init_std=0.1, rng=np.random.default_rng(1))
        weights = Tensor(np.random.default_rng(2).normal(size=7))
        with Tape() as tape:
            out = crop_and_pad_train(Tensor([0.3, -0.2, 0.1]), params, np.random.default_rng(4))
            loss = sum_(out.samples * weights)
        tape.backward(loss)
        assert np.count_nonzero(params.values.grad) == 4

    def test_every_coordinate_eventually_receives_gradient(self):
        params = PaddingParams.create(40, 4, init_std=0.1, rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        accumulated = np.zeros(40)
        for _ in range(500):
            params.values.grad = None
            with Tape() as tape:
                loss = sum_(crop_and_pad_train(Tensor([0.1, 0.2]), params, rng).samples ** 2)
            tape.backward(loss)
            accumulated += np.abs(params.values.grad)
        assert np.all(accumulated > 0)

    def test_requires_padding(self):
        with pytest.raises(ValueError):
            crop_and_pad_train(Tensor([1.0]), PaddingParams.create(0, 1), np.random.default_rng(0))

    def test_rejects_offset_outside_range(self):
        with pytest.raises(ValueError, match="outside"):
            crop_and_pad_train(Tensor([1.0]), _params(np.arange(12.0), k=3), np.random.default_rng(0), offset=9)


class TestExpandAndPadInfer:
    def test_disjoint_segments(self):
        params = _params(np.arange(8.0), k=2)
        copies = expand_and_pad_infer(Tensor([100.0]), params)
        assert [c.segment_index for c in copies] == [0, 1]
        np.testing.assert_array_equal(copies[0].samples.data, [0, 1, 100, 2, 3])
        np.testing.assert_array_equal(copies[1].samples.data, [4, 5, 100, 6, 7])

    def test_segments_partition_padding(self):
        params = PaddingParams.create(6400, 2, rng=np.random.default_rng(0))
        joined = np.concatenate([params.segment(i).data for i in range(2)])
        np.testing.assert_array_equal(joined, params.values.data)
        assert all(params.segment(i).shape == (3200,) for i in range(2))

    def test_single_copy_equals_raw_padding(self):
        params = _params([1.0, 2.0, 3.0], k=1)
        (copy,) = expand_and_pad_infer(Tensor([9.0]), params)
        np.testing.assert_array_equal(copy.samples.data, pad_raw(Tensor([9.0]), params.values).samples.data)

    def test_segment_index_out_of_range(self):
        with pytest.raises(IndexError):
            _params(np.arange(4.0), k=2).segment(2)


class TestScoring:
    def test_score_matrix_example(self):
        e = [Tensor([1.0, 0.0]), Tensor([0.0, 1.0])]
        f = [Tensor([1.0, 0.0]), Tensor([1.0, 0.0])]
        np.testing.assert_allclose(score_matrix(e, f).data, [[1.0, 1.0], [0.0, 0.0]])

    def test_identical_sides_have_unit_diagonal(self, rng):
        e = [Tensor(rng.normal(size=5)) for _ in range(3)]
        np.testing.assert_allclose(np.diag(score_matrix(e, e).data), 1.0)

    def test_single_copy_is_plain_cosine(self, rng):
        a, b = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        assert trial_score(score_matrix([a], [b])) == cosine_similarity(a, b).item()

    def test_mean_all_over_four_cosines(self, rng):
        e = [Tensor(rng.normal(size=4)) for _ in range(2)]
        f = [Tensor(rng.normal(size=4)) for _ in range(2)]
        matrix = score_matrix(e, f).data
        for i in range(2):
            for j in range(2):
                assert matrix[i, j] == pytest.approx(cosine_similarity(e[i], f[j]).item(), abs=1e-12)
        assert trial_score(matrix, "mean_all") == np.mean(matrix)
        assert trial_score(matrix, "mean_all") == pytest.approx(matrix.sum() / 4, abs=1e-15)

    @pytest.mark.parametrize("mode, expected", [("mean_all", 0.5), ("mean_offdiag", 0.5)])
    def test_trial_score_modes(self, mode, expected):
        assert trial_score(np.array([[1.0, 1.0], [0.0, 0.0]]), mode) == pytest.approx(expected)

    def test_single_entry(self):
        assert trial_score(np.array([[0.7]])) == pytest.approx(0.7)

    def test_offdiag_needs_two_copies(self):
        with pytest.raises(ValueError, match="k >= 2"):
            trial_score(np.array([[0.7]]), "mean_offdiag")

    def test_unequal_copy_counts(self, rng):
        with pytest.raises(ShapeError):
            score_matrix([Tensor(rng.normal(size=3))], [Tensor(rng.normal(size=3))] * 2)

    def test_zero_norm_embedding(self):
        with pytest.raises(ValueError, match="zero-norm"):
            score_matrix([Tensor(np.zeros(3))], [Tensor(np.ones(3))])


class TestIdenticalPadding:
    def test_shared_padding_pulls_different_utterances_together(self, frozen_model, source_corpus):
        rng = np.random.default_rng(0)
        length = 3200
        waveforms = [crop_waveform(utt.samples, length, rng) for utt in source_corpus[::3][:4]]
        curve = padding_similarity_curve(frozen_model, waveforms, [0, length, 4 * length], np.random.default_rng(1))
        assert curve[0] < curve[length] < curve[4 * length]

    def test_needs_two_waveforms(self, frozen_model):
        with pytest.raises(ValueError):
            padding_similarity_curve(frozen_model, [np.zeros(800)], [0], np.random.default_rng(0))
