import numpy as np
import pytest

from services.autograd import Tape, Tensor
from services.probes import BlackBoxBackbone, BlackBoxViolation


class TestBlackBoxBackbone:
    def test_forward_matches_model_and_is_detached(self, frozen_model, rng):
        box = BlackBoxBackbone(frozen_model)
        x = rng.uniform(-0.5, 0.5, size=(2, 1600))
        with Tape() as tape:
            out = box(Tensor(x, requires_grad=True))
        assert not out.requires_grad
        assert len(tape) == 0
        np.testing.assert_array_equal(out.data, frozen_model.embed(Tensor(x)).data)
        assert box.forward_count == 1 and box.backward_count == 0

    def test_backward_is_refused_and_counted(self, frozen_model):
        box = BlackBoxBackbone(frozen_model)
        with pytest.raises(BlackBoxViolation):
            box.backward()
        assert box.as_dict() == {"forward_count": 0, "backward_count": 1, "events": 1}

    def test_reset(self, frozen_model, rng):
        box = BlackBoxBackbone(frozen_model)
        box(rng.uniform(-0.5, 0.5, size=1600))
        box.reset()
        assert box.as_dict()["events"] == 0
        assert box.embedding_dim == 6

    def test_counts_accumulate_across_calls(self, frozen_model, rng):
        box = BlackBoxBackbone(frozen_model)
        for _ in range(3):
            box(rng.uniform(-0.5, 0.5, size=(2, 1600)))
        with pytest.raises(BlackBoxViolation):
            box.backward()
        assert box.as_dict() == {"forward_count": 3, "backward_count": 1, "events": 4}
