import io

import numpy as np
import pytest

from mixsim.design import (Dataset, ItemManipulation, SimpleDesignConfig, dataset_to_csv,
                           fixed_effects_matrix, gen_complex_design, gen_simple_design,
                           maximal_re_spec, model_matrices, read_dataset_csv)
from mixsim.stochastic import RngStream


class TestSimpleDesign:
    @pytest.mark.parametrize("m", [12, 24])
    def test_size_and_deletions(self, m):
        ds = gen_simple_design(SimpleDesignConfig(n_items=m), RngStream(1))
        full = 24 * m
        assert ds.meta["n_full"] == full
        assert 0 <= ds.meta["missing_rate"] <= 0.05
        assert full * 0.85 < ds.n <= full
        assert ds.S == 24 and ds.n_items == m

    def test_between_item_levels(self):
        ds = gen_simple_design(SimpleDesignConfig(n_items=12, item_manipulation="between_item"), RngStream(2))
        for i in np.unique(ds.item):
            assert len(set(ds.x1[ds.item == i])) == 1
        assert np.all(ds.x1[ds.item < 6] == 0) and np.all(ds.x1[ds.item >= 6] == 1)

    def test_within_item_counterbalanced(self):
        ds = gen_simple_design(SimpleDesignConfig(n_items=12), RngStream(3))
        for s in range(24):
            x = ds.x1[ds.subject == s]
            it = ds.item[ds.subject == s]
            assert np.all(x == (it + s % 2) % 2)

    @pytest.mark.parametrize("kw", [dict(n_items=10), dict(n_subjects=20), dict(missing_rate_max=0.1)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SimpleDesignConfig(**kw)


class TestComplexDesign:
    def test_ranges(self):
        for sid in range(1, 30):
            ds = gen_complex_design(RngStream(4, sid))
            assert 30 <= ds.S <= 60
            assert 20 <= ds.meta["lambda"] <= 30
            assert np.all(np.bincount(ds.subject, minlength=ds.S) >= 1)
            assert ds.x2 is not None and set(np.unique(ds.x2)) <= {0, 1, 2}
            assert abs(sum(ds.level_probs["x2"]) - 1) < 1e-12

    def test_reproducible(self):
        a, b = gen_complex_design(RngStream(5, 2)), gen_complex_design(RngStream(5, 2))
        assert np.array_equal(a.x2, b.x2) and np.array_equal(a.subject, b.subject)


class TestMatrices:
    def test_sum_contrasts(self):
        ds = Dataset("complex", subject=[0, 0, 0, 1], x1=[0, 1, 0, 1], x2=[0, 1, 2, 2], S=2)
        X = fixed_effects_matrix(ds)
        assert X.tolist() == [[1, 1, 1, 0], [1, -1, 0, 1], [1, 1, -1, -1], [1, -1, -1, -1]]

    def test_simple_coding(self):
        ds = Dataset("simple", subject=[0, 0], item=[0, 1], n_items=2, x1=[0, 1], S=1)
        assert fixed_effects_matrix(ds)[:, 1].tolist() == [0.5, -0.5]

    def test_unknown_level(self):
        with pytest.raises(ValueError):
            fixed_effects_matrix(Dataset("complex", subject=[0], x1=[2], x2=[0], S=1))

    def test_ell_matches_dense_z(self):
        ds = gen_simple_design(SimpleDesignConfig(n_items=12), RngStream(6))
        mm = model_matrices(ds)
        Z = mm.Z.toarray()
        assert Z.shape == (ds.n, 24 * 2 + 12 * 2)
        gamma = np.random.default_rng(0).normal(size=mm.q)
        zind, zval = mm.re.ell()
        assert np.allclose(Z @ gamma, (zval * gamma[zind]).sum(1))

    def test_maximal_spec(self):
        between = gen_simple_design(SimpleDesignConfig(n_items=12, item_manipulation="between_item"), RngStream(1))
        within = gen_simple_design(SimpleDesignConfig(n_items=12), RngStream(1))
        assert maximal_re_spec(between) == {"subject": (0, 1), "item": (0,)}
        assert maximal_re_spec(within) == {"subject": (0, 1), "item": (0, 1)}
        assert maximal_re_spec(gen_complex_design(RngStream(1))) == {"subject": (0, 1, 2, 3)}

    def test_bad_spec(self):
        ds = gen_complex_design(RngStream(1))
        with pytest.raises(ValueError):
            model_matrices(ds, {"item": (0,)})
        with pytest.raises(ValueError):
            model_matrices(ds, {"subject": (7,)})


class TestCsv:
    def test_complex_round_trip(self):
        ds = gen_complex_design(RngStream(8))
        ds = ds.with_response(np.random.default_rng(1).normal(size=ds.n))
        back = read_dataset_csv(io.StringIO(dataset_to_csv(ds)))
        assert back.design == "complex"
        for name in ("subject", "x1", "x2", "y"):
            assert np.array_equal(getattr(back, name), getattr(ds, name))

    @pytest.mark.parametrize("manip", list(ItemManipulation))
    def test_simple_round_trip(self, manip):
        ds = gen_simple_design(SimpleDesignConfig(n_items=12, item_manipulation=manip), RngStream(9))
        back = read_dataset_csv(io.StringIO(dataset_to_csv(ds)))
        assert back.design == "simple" and back.y is None
        assert back.meta["item_manipulation"] == manip.value
        assert np.array_equal(back.item, ds.item) and np.array_equal(back.x1, ds.x1)

    def test_bad_level(self):
        with pytest.raises(ValueError, match="x1"):
            read_dataset_csv(io.StringIO("subject,item,x1,x2,y\n1,,q,a,1\n"))

    def test_empty(self):
        with pytest.raises(ValueError):
            read_dataset_csv(io.StringIO("subject,item,x1,x2,y\n"))
