import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uemprompt.autodiff import make_rng
from uemprompt.data import MOVIELENS_GENRES, MOVIELENS_VOCAB, GenreVocabulary, HistoryItem, MovieRecord, PreferenceLabel, UserHistory, render_target
from uemprompt.lm import normalize_text
from uemprompt.metrics import EvalReport, VerbalizedPrediction, counting_baseline, label_names, render_table, verbalize, weighted_prf

from helpers import brute_force_prf, random_prf_case

SUB6 = ("Action", "Children", "Film-Noir", "Horror", "Sci-Fi", "War")


def gold(liked, disliked):
    return PreferenceLabel(tuple(liked), tuple(disliked), render_target(liked, disliked))


def pred(liked, disliked):
    return VerbalizedPrediction(frozenset(liked), frozenset(disliked), True, "")


# --- verbalizer ------------------------------------------------------------------


def test_verbalize_examples():
    v = verbalize(render_target(["Action"], ["Horror"]), MOVIELENS_VOCAB)
    assert v.liked == {"Action"} and v.disliked == {"Horror"} and v.parse_ok
    v = verbalize("the user likes to watch movies with genres action, comedy", MOVIELENS_VOCAB)
    assert v.liked == {"Action", "Comedy"} and v.disliked == frozenset() and v.parse_ok
    v = verbalize("hello world", MOVIELENS_VOCAB)
    assert v.liked == v.disliked == frozenset() and not v.parse_ok


def test_verbalize_neutral_and_partial_clauses():
    v = verbalize("The user has no strong genre preferences", MOVIELENS_VOCAB)
    assert v.parse_ok and not v.liked and not v.disliked
    v = verbalize("The user doesn't like to watch movies with genres Sci-Fi, Film-Noir", MOVIELENS_VOCAB)
    assert v.disliked == {"Sci-Fi", "Film-Noir"} and not v.liked


def test_verbalize_overlap_kept_in_liked():
    text = "the user likes to watch movies with genres war and doesn't like to watch movies with genres war , drama"
    v = verbalize(text, MOVIELENS_VOCAB)
    assert v.liked == {"War"} and v.disliked == {"Drama"} and v.overlaps == 1


def test_verbalize_ignores_unknown_words_and_is_case_insensitive():
    v = verbalize("THE USER LIKES TO WATCH MOVIES WITH GENRES zombie , SCI - FI", MOVIELENS_VOCAB)
    assert v.liked == {"Sci-Fi"}


def _pairs(genres, max_each=3):
    for nl in range(max_each + 1):
        for liked in itertools.permutations(genres, nl):
            rest = [g for g in genres if g not in liked]
            for nd in range(max_each + 1):
                for disliked in itertools.combinations(rest, nd):
                    yield list(liked), list(disliked)


def test_verbalize_inverts_render_target_exhaustively():
    sub = GenreVocabulary(SUB6)
    n = 0
    for liked, disliked in _pairs(SUB6):
        text = render_target(liked, disliked)
        for vocab in (sub, MOVIELENS_VOCAB):
            v = verbalize(text, vocab)
            assert (v.liked, v.disliked, v.parse_ok) == (frozenset(liked), frozenset(disliked), True), text
        # the LM sees normalized token text; parsing it must agree too
        assert verbalize(normalize_text(text), sub).liked == frozenset(liked)
        n += 1
    # ordered liked lists x disliked subsets: 42 + 156 + 450 + 960
    assert n == 1608


@settings(max_examples=200, deadline=None)
@given(st.permutations(MOVIELENS_GENRES), st.integers(0, 3), st.integers(0, 3))
def test_verbalize_inverts_render_target_on_full_vocab(perm, nl, nd):
    liked, disliked = perm[:nl], perm[nl : nl + nd]
    v = verbalize(render_target(liked, disliked), MOVIELENS_VOCAB)
    assert v.liked == frozenset(liked) and v.disliked == frozenset(disliked)


# --- weighted P/R/F1 ------------------------------------------------------------------


def test_label_space_sizes():
    assert len(label_names(MOVIELENS_VOCAB)) == 38
    assert len(label_names(MOVIELENS_VOCAB, "liked")) == 19


def test_perfect_and_empty_predictions():
    golds = [gold(["Action"], ["Horror"]), gold(["Comedy", "Drama"], [])]
    perfect = weighted_prf([pred(g.liked, g.disliked) for g in golds], golds, MOVIELENS_VOCAB)
    assert perfect.precision == perfect.recall == perfect.f1 == 1.0
    empty = weighted_prf([pred([], []) for _ in golds], golds, MOVIELENS_VOCAB)
    assert empty.precision == empty.recall == empty.f1 == 0.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        weighted_prf([pred([], [])], [], MOVIELENS_VOCAB)


def test_three_example_hand_case():
    vocab = GenreVocabulary(("Action", "Comedy", "Drama", "Horror"))
    golds = [gold(["Action", "Comedy"], ["Horror"]), gold(["Action"], []), gold(["Drama"], ["Horror", "Comedy"])]
    preds = [pred(["Action"], ["Horror"]), pred(["Action", "Drama"], ["Comedy"]), pred(["Action"], ["Horror"])]
    rep = weighted_prf(preds, golds, vocab)
    la = rep.per_label["liked_Action"]
    assert (la.precision, la.recall, la.support) == (2 / 3, 1.0, 2) and la.f1 == pytest.approx(0.8, abs=1e-15)
    assert rep.per_label["disliked_Horror"].f1 == 1.0
    for name in ("liked_Comedy", "liked_Drama", "disliked_Comedy"):
        assert rep.per_label[name].f1 == 0.0 and rep.per_label[name].support == 1
    assert rep.per_label["liked_Horror"].support == 0
    assert rep.precision == pytest.approx(10 / 21, abs=1e-15)
    assert rep.recall == pytest.approx(4 / 7, abs=1e-15)
    assert rep.f1 == pytest.approx(18 / 35, abs=1e-15)


@pytest.mark.parametrize("label_space", ["both", "liked"])
def test_weighted_prf_matches_brute_force(label_space):
    rng = make_rng(2024)
    for case in range(200):
        preds, golds = random_prf_case(rng, MOVIELENS_GENRES, int(rng.integers(1, 25)))
        rep = weighted_prf(preds, golds, MOVIELENS_VOCAB, label_space)
        per, p, r, f = brute_force_prf(preds, golds, MOVIELENS_GENRES, label_space)
        assert abs(rep.precision - p) <= 1e-12 and abs(rep.recall - r) <= 1e-12 and abs(rep.f1 - f) <= 1e-12
        for name, (lp, lr, lf, sup) in per.items():
            s = rep.per_label[name]
            assert (s.precision, s.recall, s.f1, s.support) == (lp, lr, lf, sup)
            assert s.f1 <= max(s.precision, s.recall) + 1e-15


def test_weighted_prf_agrees_with_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    from uemprompt.metrics import indicator_matrix

    rng = make_rng(7)
    for _ in range(30):
        preds, golds = random_prf_case(rng, MOVIELENS_GENRES, 40)
        rep = weighted_prf(preds, golds, MOVIELENS_VOCAB)
        yt = indicator_matrix([(g.liked, g.disliked) for g in golds], MOVIELENS_VOCAB)
        yp = indicator_matrix([(p.liked, p.disliked) for p in preds], MOVIELENS_VOCAB)
        p, r, f, _ = skm.precision_recall_fscore_support(yt, yp, average="weighted", zero_division=0)
        assert abs(rep.precision - p) < 1e-12 and abs(rep.recall - r) < 1e-12 and abs(rep.f1 - f) < 1e-12


def test_parse_failures_are_counted():
    golds = [gold(["Action"], []), gold(["War"], [])]
    preds = [verbalize("garbage", MOVIELENS_VOCAB), verbalize(render_target(["War"], []), MOVIELENS_VOCAB)]
    rep = weighted_prf(preds, golds, MOVIELENS_VOCAB)
    assert rep.parse_failure_rate == 0.5
    assert rep.recall == 0.5


def test_report_json_round_trip():
    golds = [gold(["Action"], ["Horror"])]
    rep = weighted_prf([pred(["Action"], [])], golds, MOVIELENS_VOCAB)
    rep.meta.update({"mode": "embedding", "p": 16})
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert "Emb" in render_table([("Emb. Hist. 16", rep)])


# --- counting baseline -------------------------------------------------------------------


def history(genre_counts, rating=3.0):
    items, t = [], 0
    for g, n in genre_counts.items():
        for _ in range(n):
            items.append(HistoryItem(MovieRecord(f"m{t}", f"M{t}", (g,)), rating, t))
            t += 1
    return UserHistory.from_items("u", items)


def test_counting_baseline_examples():
    p = counting_baseline(history({"Action": 10, "Comedy": 5, "Drama": 5, "Horror": 1}))
    assert p.liked == {"Action", "Comedy", "Drama"} and p.disliked == frozenset()
    assert counting_baseline(history({"War": 2, "Western": 7})).liked == {"War", "Western"}
    # four-way tie resolves by name
    assert counting_baseline(history({"War": 2, "Crime": 2, "Action": 2, "Drama": 2})).liked == {"Action", "Crime", "Drama"}


def test_counting_baseline_ignores_ratings():
    counts = {"Action": 4, "Horror": 3, "War": 1, "Drama": 2}
    base = counting_baseline(history(counts, 3.0))
    for r in (0.5, 1.0, 4.5, 5.0):
        assert counting_baseline(history(counts, r)) == base
    rng = np.random.default_rng(0)
    h = history(counts)
    scrambled = UserHistory.from_items("u", [HistoryItem(i.movie, float(rng.integers(1, 11)) / 2, i.timestamp) for i in h.items])
    assert counting_baseline(scrambled).liked == base.liked


def test_counting_baseline_cannot_score_disliked_labels():
    golds = [gold([], ["Horror"])]
    rep = weighted_prf([counting_baseline(history({"Horror": 5}))], golds, MOVIELENS_VOCAB)
    assert rep.recall == 0.0
