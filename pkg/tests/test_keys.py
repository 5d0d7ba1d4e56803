import numpy as np
import pytest

from melkey.errors import DataError
from melkey.keys import (ALL_KEYS, CATEGORIES, EvalReport, Key, classify_relation, evaluate,
                         format_key, parse_key, predict_track, transpose_key, weighted_score)

MAJOR, MINOR = "major", "minor"


def test_parse_basic():
    assert parse_key("d minor") == Key(2, MINOR)
    assert parse_key("Eb major") == Key(3, MAJOR)
    assert parse_key("F# min") == Key(6, MINOR)
    assert parse_key("  c MAJ ") == Key(0, MAJOR)


def test_parse_enharmonic_pairs():
    pairs = [("C#", "Db"), ("D#", "Eb"), ("F#", "Gb"), ("G#", "Ab"), ("A#", "Bb")]
    for sharp, flat in pairs:
        for mode in (MAJOR, MINOR):
            assert parse_key(f"{sharp} {mode}") == parse_key(f"{flat} {mode}")


def test_parse_rejects_bad_tonic_and_mode():
    with pytest.raises(DataError):
        parse_key("H major")
    with pytest.raises(DataError):
        parse_key("C dorian")
    with pytest.raises(DataError):
        parse_key("Cx major")
    with pytest.raises(DataError):
        parse_key("justoneword")


def test_format_parse_round_trip_all_keys():
    for key in ALL_KEYS:
        assert parse_key(format_key(key)) == key


def test_class_index_bijection():
    for idx in range(24):
        key = Key.from_class_index(idx)
        assert key.class_index == idx
    assert Key(2, MINOR).class_index == 14


def test_transpose():
    assert transpose_key(Key(0, MAJOR), 2) == Key(2, MAJOR)
    assert transpose_key(Key(11, MINOR), 1) == Key(0, MINOR)
    assert transpose_key(Key(5, MAJOR), -6) == Key(11, MAJOR)
    for key in ALL_KEYS:
        assert transpose_key(key, 0) == key
        assert transpose_key(transpose_key(key, 5), -5) == key


def test_relation_examples():
    c_major = Key(0, MAJOR)
    assert classify_relation(c_major, Key(7, MAJOR)) == "fifth"
    assert classify_relation(c_major, Key(9, MINOR)) == "relative"
    assert classify_relation(Key(9, MINOR), c_major) == "relative"
    assert classify_relation(c_major, Key(0, MINOR)) == "parallel"
    assert classify_relation(c_major, Key(2, MAJOR)) == "other"
    assert classify_relation(c_major, c_major) == "correct"


def test_relation_fifth_direction_flag():
    c_major = Key(0, MAJOR)
    below = Key(5, MAJOR)  # a fifth below C is F
    assert classify_relation(c_major, below) == "other"
    assert classify_relation(c_major, below, fifth_both_directions=True) == "fifth"


def test_relation_partition_24x24():
    # every (reference, estimate) pair falls in exactly one category
    counts = {cat: 0 for cat in CATEGORIES}
    for ref in ALL_KEYS:
        for est in ALL_KEYS:
            counts[classify_relation(ref, est)] += 1
    assert sum(counts.values()) == 24 * 24
    assert counts["correct"] == 24
    assert counts["fifth"] == 24
    assert counts["relative"] == 24
    assert counts["parallel"] == 24


def test_relation_transposition_invariance():
    for ref in ALL_KEYS:
        for est in ALL_KEYS:
            base = classify_relation(ref, est)
            for n in range(12):
                assert classify_relation(transpose_key(ref, n), transpose_key(est, n)) == base


def test_weighted_score_table_rows():
    assert weighted_score(72.02, 3.48, 3.64, 5.30) == pytest.approx(75.91, abs=0.01)
    assert weighted_score(79.87, 4.55, 6.49, 1.30) == pytest.approx(84.35, abs=0.01)
    assert weighted_score(45.36, 20.69, 6.79, 7.78) == pytest.approx(59.30, abs=0.01)


def test_weighted_score_sensitivities():
    base = weighted_score(50.0, 10.0, 10.0, 10.0)
    assert weighted_score(51.0, 10.0, 10.0, 10.0) - base == pytest.approx(1.0)
    assert weighted_score(50.0, 11.0, 10.0, 10.0) - base == pytest.approx(0.5)
    assert weighted_score(50.0, 10.0, 11.0, 10.0) - base == pytest.approx(0.3)
    assert weighted_score(50.0, 10.0, 10.0, 11.0) - base == pytest.approx(0.2)
    with pytest.raises(DataError):
        weighted_score(-1.0, 0.0, 0.0, 0.0)


class _FixedLogitProbe:
    """Maps embedding rows to pre-cooked logits via their first entry."""

    def __init__(self, table):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def __call__(self, emb):
        return np.stack([self.table[int(row[0])] for row in np.atleast_2d(emb)])


def test_predict_track_single_window():
    logits = np.zeros(24)
    logits[17] = 3.0
    probe = _FixedLogitProbe({0: logits})
    assert predict_track(np.zeros((1, 4)), probe) == Key.from_class_index(17)


def test_predict_track_two_window_average():
    # window A: 0.6 on class 2, rest uniform; window B: 0.6 on class 5
    p_a = np.full(24, 0.4 / 23)
    p_a[2] = 0.6
    p_b = np.full(24, 0.4 / 23)
    p_b[5] = 0.6
    logit_a, logit_b = np.log(p_a), np.log(p_b)
    emb = np.zeros((2, 4))
    emb[1, 0] = 1.0
    probe = _FixedLogitProbe({0: logit_a, 1: logit_b})
    expected = int(np.argmax((p_a + p_b) / 2.0))
    assert predict_track(emb, probe).class_index == expected


def test_predict_track_tie_breaks_low_and_order_invariant():
    logits = np.zeros(24)
    probe = _FixedLogitProbe({0: logits, 1: logits})
    assert predict_track(np.zeros((2, 3)), probe).class_index == 0

    rng = np.random.default_rng(5)
    table = {i: rng.normal(size=24) for i in range(6)}
    probe = _FixedLogitProbe(table)
    emb = np.zeros((6, 2))
    emb[:, 0] = np.arange(6)
    forward = predict_track(emb, probe)
    backward = predict_track(emb[::-1], probe)
    assert forward == backward

    with pytest.raises(DataError):
        predict_track(np.zeros((0, 4)), probe)


def test_evaluate_all_correct_and_all_fifth():
    refs = list(ALL_KEYS)
    report = evaluate(refs, refs)
    assert report.weighted == pytest.approx(100.0)
    assert report.percentage("correct") == pytest.approx(100.0)

    fifth_up = [transpose_key(k, 7) for k in refs]
    report = evaluate(fifth_up, refs)
    assert report.weighted == pytest.approx(50.0)
    assert report.percentage("fifth") == pytest.approx(100.0)


def test_evaluate_manual_enumeration():
    # hand-built 10-track set: 5 correct, 2 fifth, 1 relative, 1 parallel, 1 other
    refs = [Key(0, MAJOR)] * 10
    preds = ([Key(0, MAJOR)] * 5 + [Key(7, MAJOR)] * 2 +
             [Key(9, MINOR)] + [Key(0, MINOR)] + [Key(3, MAJOR)])
    report = evaluate(preds, refs)
    assert report.counts == {"correct": 5, "fifth": 2, "relative": 1, "parallel": 1, "other": 1}
    # spreadsheet arithmetic: 50 + 0.5*20 + 0.3*10 + 0.2*10
    assert report.weighted == pytest.approx(50 + 10 + 3 + 2)
    assert sum(report.percentage(c) for c in CATEGORIES) == pytest.approx(100.0, abs=0.01)
    assert report.weighted >= report.percentage("correct")


def test_evaluate_rejects_mismatch_and_empty():
    with pytest.raises(DataError):
        evaluate([Key(0, MAJOR)], [Key(0, MAJOR), Key(1, MAJOR)])
    with pytest.raises(DataError):
        evaluate([], [])


def test_report_csv(tmp_path):
    from melkey.keys import write_report_csv

    report = EvalReport(n_tracks=4, counts={"correct": 2, "fifth": 1, "relative": 0,
                                            "parallel": 0, "other": 1})
    out = tmp_path / "report.csv"
    write_report_csv(report, out)
    text = out.read_text()
    assert text.splitlines()[0] == "weighted,correct,fifth,relative,parallel,other,n_tracks"
    assert "62.5" in text  # 50 + 0.5*25
