import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sieve.errors import ShapeError
from sieve.grounding import build_prompt_inputs
from sieve.model import forward, grad_scalar_logit
from sieve.saliency import (
    compute_saliency,
    filter_anchors,
    load_stop_words,
)


class TestComputeSaliency:
    def test_zero_grads_zero_scores(self):
        inputs = np.ones((4, 8))
        np.testing.assert_array_equal(
            compute_saliency(np.zeros((4, 8)), inputs), np.zeros(4)
        )

    def test_hand_example(self):
        grads = np.array([[1.0, 2.0], [0.0, -1.0]])
        inputs = np.array([[3.0, 0.5], [2.0, 4.0]])
        # rows: ||(3, 1)|| = sqrt(10), ||(0, -4)|| = 4
        np.testing.assert_allclose(
            compute_saliency(grads, inputs), [np.sqrt(10.0), 4.0]
        )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_saliency(np.zeros((3, 2)), np.zeros((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(
        scale=st.floats(min_value=0.1, max_value=100.0),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    def test_homogeneity(self, scale, seed):
        # Sal is degree-2 homogeneous in a joint rescale of grads and inputs
        rng = np.random.default_rng(seed)
        g = rng.normal(size=(5, 7))
        x = rng.normal(size=(5, 7))
        base = compute_saliency(g, x)
        np.testing.assert_allclose(
            compute_saliency(scale * g, scale * x), scale**2 * base, rtol=1e-9
        )


class TestFilterAnchors:
    def _stream(self, model, samples):
        sample = samples[0]
        inputs, stream, _ = build_prompt_inputs(model, sample.image, sample.question)
        return inputs, stream

    def test_stop_words_and_controls_excluded(self, tiny_model, samples):
        inputs, stream = self._stream(tiny_model, samples)
        scores = np.ones(len(stream.ids))
        out = filter_anchors(scores, stream, tiny_model.config, threshold=0.0)
        stop = load_stop_words()
        for _pos, _tid, tok, _s in out.anchors:
            assert tok not in stop
            assert not tok.startswith("<")

    def test_vision_positions_excluded(self, tiny_model, samples):
        inputs, stream = self._stream(tiny_model, samples)
        scores = np.zeros(len(stream.ids))
        scores[: stream.n_vision] = 100.0  # huge saliency on vision tokens
        out = filter_anchors(scores, stream, tiny_model.config, threshold=0.0)
        for pos, *_ in out.anchors:
            assert pos >= stream.n_vision

    def test_relative_threshold_rule(self, tiny_model, samples):
        inputs, stream = self._stream(tiny_model, samples)
        scores = np.zeros(len(stream.ids), dtype=np.float64)
        text = stream.text_positions()
        scores[text[0]] = 10.0
        scores[text[1]] = 4.0  # below 0.5 * 10
        out = filter_anchors(scores, stream, tiny_model.config)
        assert out.threshold_used == 5.0
        assert all(s > 5.0 for *_, s in out.anchors)

    def test_sorted_desc_and_capped(self, tiny_model, samples):
        inputs, stream = self._stream(tiny_model, samples)
        scores = np.arange(len(stream.ids), dtype=np.float64)
        out = filter_anchors(
            scores, stream, tiny_model.config, threshold=0.0, max_anchors=2
        )
        assert len(out.anchors) <= 2
        vals = [s for *_, s in out.anchors]
        assert vals == sorted(vals, reverse=True)

    def test_idempotent_under_refiltering(self, tiny_model, samples):
        inputs, stream = self._stream(tiny_model, samples)
        scores = np.arange(len(stream.ids), dtype=np.float64)
        once = filter_anchors(scores, stream, tiny_model.config)
        twice = filter_anchors(
            scores, stream, tiny_model.config, threshold=once.threshold_used
        )
        assert once.anchors == twice.anchors

    def test_negative_threshold_rejected(self, tiny_model, samples):
        inputs, stream = self._stream(tiny_model, samples)
        with pytest.raises(ValueError):
            filter_anchors(
                np.zeros(len(stream.ids)), stream, tiny_model.config, threshold=-1.0
            )


class TestLeaveOneOutAgreement:
    def test_saliency_tracks_ablation_impact(self, tiny_model, samples):
        # For most samples the top-saliency text token should be among the
        # most impactful under leave-one-out logit deltas.
        hits = 0
        total = 0
        for sample in samples:
            inputs, stream, _ = build_prompt_inputs(
                tiny_model, sample.image, sample.question
            )
            stack = forward(tiny_model, inputs)
            target = int(np.argmax(stack.logits))
            report = grad_scalar_logit(tiny_model, inputs, target)
            scores = compute_saliency(report.grads, stack.inputs)
            text = stream.text_positions()[:-1]  # keep final position intact
            if len(text) < 3:
                continue
            deltas = {}
            for pos in text:
                ablated = inputs.copy()
                ablated[pos] = 0.0
                deltas[pos] = abs(
                    forward(tiny_model, ablated).logits[target]
                    - stack.logits[target]
                )
            top_sal = max(text, key=lambda p: scores[p])
            top3_delta = sorted(deltas, key=deltas.get, reverse=True)[:3]
            hits += top_sal in top3_delta
            total += 1
        assert total >= 4
        assert hits / total >= 0.5
