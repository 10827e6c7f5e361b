import json

import numpy as np
import pytest

from conftest import as_model, random_params
from seasonal_hmm.model import ModelSpec, TrendForm
from seasonal_hmm.persistence import load_model, model_from_dict, model_to_dict, save_model


def _models(rng):
    yield as_model(ModelSpec(3, 4, 2, 2), random_params(ModelSpec(3, 4, 2, 2), rng))
    spec = ModelSpec(2, 2, 1, 1, trend_form=TrendForm.piecewise(1983.0))
    yield as_model(spec, random_params(spec, rng), 1961)
    spec = ModelSpec(1, 1, 0, 0, trend_form=TrendForm.constant())
    yield as_model(spec, random_params(spec, rng))


class TestPersistence:
    def test_round_trip_exact(self, rng, tmp_path):
        for i, m in enumerate(_models(rng)):
            path = tmp_path / f"m{i}.json"
            save_model(path, m, {"seed": 1})
            back = load_model(path)
            assert back.spec == m.spec
            assert back.calendar == m.calendar
            a, b = m.params.stacked(), back.params.stacked()
            assert a.keys() == b.keys()
            for k in a:
                np.testing.assert_array_equal(a[k], b[k])
            assert back.loglik == m.loglik and back.n_params == m.n_params

    def test_byte_identical(self, rng, tmp_path):
        m = next(_models(rng))
        save_model(tmp_path / "a.json", m, {"seed": 1})
        save_model(tmp_path / "b.json", load_model(tmp_path / "a.json"), {"seed": 1})
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_plain_json(self, rng, tmp_path):
        m = next(_models(rng))
        save_model(tmp_path / "a.json", m, {"stage": "fit"})
        doc = json.loads((tmp_path / "a.json").read_text())
        assert doc["header"] == {"stage": "fit"}
        assert model_to_dict(model_from_dict(doc)) == model_to_dict(m)

    def test_corrupt(self, rng):
        d = model_to_dict(next(_models(rng)))
        del d["spec"]
        with pytest.raises(KeyError):
            model_from_dict(d)
