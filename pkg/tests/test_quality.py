import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turbvid.prompts import DEFAULT_PAIR_INDEX, PROMPT_PAIRS, default_pair
from turbvid.quality import (kendall_tau, psnr, rankdata, select_prompt,
                             spearman_rho, ssim_eval)


def brute_kendall(a, b):
    """Independent O(n^2) tau-b from explicit pair counting."""
    n = len(a)
    c = d = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa = (a[i] > a[j]) - (a[i] < a[j])
            sb = (b[i] > b[j]) - (b[i] < b[j])
            if sa == 0 and sb == 0:
                continue
            if sa == 0:
                tx += 1
            elif sb == 0:
                ty += 1
            elif sa == sb:
                c += 1
            else:
                d += 1
    denom = math.sqrt((c + d + tx) * (c + d + ty))
    return (c - d) / denom if denom else 0.0


def brute_spearman(a, b):
    """Textbook Pearson-of-ranks with midranks, written independently."""
    def ranks(x):
        order = sorted(range(len(x)), key=lambda i: x[i])
        r = [0.0] * len(x)
        i = 0
        while i < len(x):
            j = i
            while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2 + 1
            i = j + 1
        return r

    ra, rb = ranks(list(a)), ranks(list(b))
    n = len(ra)
    ma, mb = sum(ra) / n, sum(rb) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    den = math.sqrt(sum((x - ma) ** 2 for x in ra) * sum((y - mb) ** 2 for y in rb))
    return num / den if den else 0.0


class TestPsnr:
    def test_identical_capped(self):
        x = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
        assert psnr(x, x) == 99.0

    def test_quarter_mse(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.5)
        assert psnr(a, b) == pytest.approx(6.0206, abs=1e-3)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0.3, 0.7, (16, 16, 3))
        values = []
        for sigma in (0.01, 0.03, 0.1):
            noisy = base + rng.normal(0, sigma, base.shape)
            values.append(psnr(base, noisy))
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsimEval:
    def test_self_is_one(self):
        x = np.random.default_rng(2).uniform(0, 1, (16, 16, 3))
        assert ssim_eval(x, x) == pytest.approx(1.0, abs=1e-7)

    def test_inverted_checkerboard_negative(self):
        ys, xs = np.mgrid[0:16, 0:16]
        checker = ((xs + ys) % 2).astype(np.float64)[..., None]
        assert ssim_eval(checker, 1.0 - checker) < 0.0


class TestKendall:
    def test_identical_orderings(self):
        assert kendall_tau([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0

    def test_reversed(self):
        assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    def test_spec_example(self):
        assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6)

    def test_zero_variance_warns_zero(self):
        assert kendall_tau([1, 1, 1], [1, 2, 3]) == 0.0

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(3)
        for trial in range(300):
            n = rng.integers(2, 51)
            if trial % 3 == 0:
                a = rng.integers(0, 5, n).astype(float)  # heavy ties
                b = rng.integers(0, 5, n).astype(float)
            else:
                a = rng.normal(size=n)
                b = rng.normal(size=n)
            got = kendall_tau(a, b)
            want = brute_kendall(a.tolist(), b.tolist())
            assert got == pytest.approx(want, abs=1e-12), f"n={n}"

    def test_matches_scipy(self):
        from scipy.stats import kendalltau
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = rng.integers(3, 40)
            a = rng.integers(0, 8, n).astype(float)
            b = rng.integers(0, 8, n).astype(float)
            if np.all(a == a[0]) or np.all(b == b[0]):
                continue
            assert kendall_tau(a, b) == pytest.approx(kendalltau(a, b).statistic, abs=1e-12)


class TestSpearman:
    def test_identical_orderings(self):
        assert spearman_rho([1, 2, 3], [5, 6, 9]) == pytest.approx(1.0)

    def test_spec_example(self):
        assert spearman_rho([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)

    def test_rank_invariance_under_monotone_transform(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=20)
        b = rng.normal(size=20)
        base = spearman_rho(a, b)
        assert spearman_rho(np.exp(a), b) == pytest.approx(base, abs=1e-12)
        assert spearman_rho(a, 100 * b + 3) == pytest.approx(base, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for trial in range(300):
            n = rng.integers(2, 51)
            if trial % 3 == 0:
                a = rng.integers(0, 5, n).astype(float)
                b = rng.integers(0, 5, n).astype(float)
            else:
                a = rng.normal(size=n)
                b = rng.normal(size=n)
            got = spearman_rho(a, b)
            want = brute_spearman(a.tolist(), b.tolist())
            assert got == pytest.approx(want, abs=1e-12)

    def test_matches_scipy(self):
        from scipy.stats import spearmanr
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = rng.integers(3, 40)
            a = rng.integers(0, 8, n).astype(float)
            b = rng.normal(size=n)
            if np.all(a == a[0]):
                continue
            assert spearman_rho(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)

    def test_rankdata_midranks(self):
        assert rankdata([10, 20, 20, 30]).tolist() == [1.0, 2.5, 2.5, 4.0]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(min_value=-100, max_value=100), min_size=2, max_size=30))
    def test_symmetry(self, xs):
        rng = np.random.default_rng(8)
        ys = rng.normal(size=len(xs)).tolist()
        assert spearman_rho(xs, ys) == pytest.approx(spearman_rho(ys, xs), abs=1e-12)
        assert kendall_tau(xs, ys) == pytest.approx(kendall_tau(ys, xs), abs=1e-12)


class TestSelectPrompt:
    def test_identical_candidate_wins_with_one(self):
        ref = [0.9, 0.7, 0.5, 0.4, 0.2]
        report = select_prompt(ref, {"same": list(ref), "noise": [0.1, 0.9, 0.2, 0.8, 0.3]})
        best = report.best()
        assert best.label == "same"
        assert best.combined == pytest.approx(1.0)

    def test_reversed_ranks_last(self):
        ref = [5.0, 4.0, 3.0, 2.0, 1.0]
        report = select_prompt(ref, {"rev": ref[::-1], "same": list(ref)})
        assert report.best().label == "same"
        worst = max(report.scores, key=lambda s: s.rank)
        assert worst.label == "rev"
        assert worst.combined == pytest.approx(-1.0)

    def test_ranking_is_permutation(self):
        rng = np.random.default_rng(9)
        ref = rng.normal(size=30)
        cands = {f"c{i}": (ref + rng.normal(0, 0.1 * (i + 1), 30)).tolist() for i in range(6)}
        report = select_prompt(ref, cands)
        assert sorted(s.rank for s in report.scores) == [1, 2, 3, 4, 5, 6]

    def test_matches_brute_force_ranking(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            n = rng.integers(8, 30)
            ref = rng.normal(size=n)
            cands = {}
            for i in range(5):
                cands[f"c{i}"] = np.asarray(ref + rng.normal(0, 0.05 + 0.4 * rng.uniform(), n))
            report = select_prompt(ref, cands)
            combos = {label: 0.5 * (brute_kendall(ref.tolist(), seq.tolist())
                                    + brute_spearman(ref.tolist(), seq.tolist()))
                      for label, seq in cands.items()}
            want = sorted(combos, key=lambda L: -combos[L])
            got = [s.label for s in sorted(report.scores, key=lambda s: s.rank)]
            assert got == want

    def test_invariant_under_monotone_rescaling(self):
        rng = np.random.default_rng(11)
        ref = rng.normal(size=20)
        cands = {f"c{i}": ref + rng.normal(0, 0.2 * (i + 1), 20) for i in range(4)}
        base = [s.label for s in sorted(select_prompt(ref, cands).scores,
                                        key=lambda s: s.rank)]
        rescaled = {L: np.exp(0.5 * np.asarray(seq)) for L, seq in cands.items()}
        again = [s.label for s in sorted(select_prompt(ref, rescaled).scores,
                                         key=lambda s: s.rank)]
        assert base == again

    def test_tie_breaks_toward_lower_index(self):
        ref = [1.0, 2.0, 3.0, 4.0]
        report = select_prompt(ref, {"first": list(ref), "second": [2.0, 4.0, 6.0, 8.0]})
        assert report.best().label == "first"

    def test_empty_candidates(self):
        with pytest.raises(ValueError):
            select_prompt([1, 2, 3], {})


class TestPromptTable:
    def test_six_pairs(self):
        assert len(PROMPT_PAIRS) == 6

    def test_default_is_pair_three(self):
        assert DEFAULT_PAIR_INDEX == 3
        pos, neg = default_pair()
        assert pos == "a clean and sharp natural image"
        assert neg == "a degraded image with noise and turbulence distortion"
