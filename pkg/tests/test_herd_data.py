import io
from dataclasses import replace

import numpy as np
import pytest

from conftest import behavior_rows, day, lesion_rows, random_matrix
from ddwatch.herd_data import (
    CowProfile,
    Episode,
    FeatureMatrix,
    HerdDataError,
    derive_episodes,
    grouped_kfold,
    grouped_split,
    lactation_period,
    match_controls,
    parse_behavior,
    parse_lesions,
    parse_profiles,
    write_behavior,
    write_lesions,
    write_profiles,
)

HEADER = "cow_id,date,non_active,active,highly_active,eating,ruminating,ear_temp\n"


def test_parse_valid_row():
    rows = parse_behavior(HEADER + "c1,2023-01-05,0.40,0.20,0.05,0.20,0.15,38.6\n")
    assert len(rows) == 1
    r = rows[0]
    assert (r.cow_id, r.date.isoformat(), r.active, r.ear_temp) == ("c1", "2023-01-05", 0.2, 38.6)


def test_parse_proportion_out_of_range_reports_line():
    text = HEADER + "c1,2023-01-05,0.40,0.20,0.05,0.20,0.15,38.6\nc1,2023-01-06,0.40,1.3,0.05,0.20,0.15,38.6\n"
    with pytest.raises(HerdDataError, match="proportion out of range") as err:
        parse_behavior(text)
    assert err.value.line == 3
    assert err.value.reason == "proportion_out_of_range"


def test_parse_duplicate_cow_day():
    row = "c1,2023-01-05,0.40,0.20,0.05,0.20,0.15,38.6\n"
    with pytest.raises(HerdDataError, match="duplicate cow-day"):
        parse_behavior(HEADER + row + row)


@pytest.mark.parametrize(
    "text, reason",
    [
        ("cow,date,a\n", "unknown_header"),
        (HEADER + "c1,2023-01-05,0.4\n", "malformed_row"),
        (HEADER + "c1,2023-13-05,0.40,0.20,0.05,0.20,0.15,38.6\n", "malformed_row"),
        (HEADER + "c1,2023-01-05,0.40,abc,0.05,0.20,0.15,38.6\n", "malformed_row"),
        (HEADER + "c1,2023-01-05,0.40,0.20,0.05,0.20,0.15,60.0\n", "ear_temp_out_of_range"),
        ("", "empty_file"),
    ],
)
def test_parse_behavior_errors(text, reason):
    with pytest.raises(HerdDataError) as err:
        parse_behavior(text)
    assert err.value.reason == reason


def test_parse_sorts_by_cow_then_date():
    text = HEADER + "".join(
        f"{c},{d},0.4,0.2,0.05,0.2,0.15,38.6\n" for c, d in [("b", "2023-01-02"), ("a", "2023-01-03"), ("a", "2023-01-01")]
    )
    assert [(r.cow_id, r.date.day) for r in parse_behavior(text)] == [("a", 1), ("a", 3), ("b", 2)]


def test_lesion_and_profile_validation():
    with pytest.raises(HerdDataError, match="status"):
        parse_lesions("cow_id,date,status,size\nc1,2023-01-01,active,none\n")
    with pytest.raises(HerdDataError):
        parse_lesions("cow_id,date,status,size\nc1,2023-01-01,healing,small\n")
    with pytest.raises(HerdDataError, match="parity"):
        parse_profiles("cow_id,parity,repro_status,calving_date\nc1,0,open,2022-10-01\n")
    with pytest.raises(HerdDataError):
        parse_profiles("cow_id,parity,repro_status,calving_date\nc1,2,dry,2022-10-01\n")


def test_round_trip_is_byte_identical():
    beh = HEADER + "a,2023-01-01,0.4,0.2,0.05,0.2,0.15,38.6\na,2023-01-02,0.41,0.1234,0.0,1.0,0.15,37.25\n"
    les = "cow_id,date,status,size\na,2023-01-01,none,none\na,2023-01-02,active,large\n"
    pro = "cow_id,parity,repro_status,calving_date\na,3,pregnant,2022-09-30\n"
    for text, parse, write in ((beh, parse_behavior, write_behavior), (les, parse_lesions, write_lesions), (pro, parse_profiles, write_profiles)):
        buf = io.StringIO()
        write(parse(text), buf)
        assert buf.getvalue() == text


@pytest.mark.parametrize("dim, period", [(0, "early"), (50, "early"), (100, "early"), (101, "mid"), (150, "mid"), (199, "mid"), (200, "late"), (400, "late")])
def test_lactation_period(dim, period):
    assert lactation_period(dim) == period


def test_lactation_period_negative():
    with pytest.raises(ValueError):
        lactation_period(-1)


def _case(cow="case", sensor_days=range(0, 15), statuses=None):
    statuses = statuses or {10: "active", 11: "active", 12: "active"}
    return behavior_rows(cow, sensor_days), lesion_rows(cow, statuses)


def test_derive_episode_all_rules_pass():
    beh, les = _case()
    enrolled, rejected = derive_episodes(les, beh)
    assert rejected == []
    assert [(e.case_cow_id, e.day0) for e in enrolled] == [("case", day(10))]
    assert all(enrolled[0].enrollment_checks.values())


def test_derive_episode_not_persistent():
    beh, les = _case(statuses={10: "active", 11: "none"})
    assert derive_episodes(les, beh) == ([], [("case", "lesion_not_persistent")])
    # an unobserved day 1 does not count as a persistent lesion either
    beh, les = _case(statuses={10: "active"})
    assert derive_episodes(les, beh)[1] == [("case", "lesion_not_persistent")]


def test_derive_episode_sensor_gap():
    beh, les = _case(sensor_days=[d for d in range(15) if d != 6])
    assert derive_episodes(les, beh) == ([], [("case", "incomplete_sensor_history")])


def test_derive_episode_digressing_lesion_in_lookback():
    beh, les = _case(statuses={5: "digressing", 10: "active", 11: "active"})
    assert derive_episodes(les, beh)[1] == [("case", "lesion_in_lookback")]


def test_derive_episode_anchors_on_earliest_active_and_ignores_healthy():
    beh, les = _case(statuses={10: "active", 11: "digressing", 13: "active"})
    beh2 = behavior_rows("healthy", range(15))
    les2 = lesion_rows("healthy", {i: "none" for i in range(15)})
    enrolled, rejected = derive_episodes(les + les2, beh + beh2)
    assert [e.day0 for e in enrolled] == [day(10)] and rejected == []


def _profile(cow, parity, repro, dim_at_day10):
    return CowProfile(cow, parity, repro, day(10 - dim_at_day10))


def _episode(cow="case", d0=10):
    return Episode(cow, day(d0))


def test_match_unique_candidate():
    profiles = [_profile("case", 2, "pregnant", 150), _profile("ctl", 2, "pregnant", 130)]
    beh = behavior_rows("ctl", range(15))
    out = match_controls([_episode()], profiles, beh)
    assert out[0].control_cow_id == "ctl" and out[0].enrollment_checks["matched"]
    assert out[0].lactation_period == "mid"


def test_match_requires_all_three_keys():
    profiles = [_profile("case", 2, "pregnant", 150), _profile("x", 2, "open", 150), _profile("y", 3, "pregnant", 150),
                _profile("z", 2, "pregnant", 50)]
    beh = sum((behavior_rows(c, range(15)) for c in "xyz"), [])
    out = match_controls([_episode()], profiles, beh)
    assert out[0].control_cow_id is None and out[0].enrollment_checks["matched"] is False


def test_match_nearest_dim_tie_break():
    profiles = [_profile("case", 2, "pregnant", 130), _profile("far", 2, "pregnant", 180), _profile("near", 2, "pregnant", 120)]
    beh = behavior_rows("far", range(15)) + behavior_rows("near", range(15))
    out = match_controls([_episode()], profiles, beh)
    # brute force over the candidate list
    cands = [p for p in profiles if p.cow_id != "case"]
    expected = min(cands, key=lambda p: (abs(p.dim_at(day(10)) - 130), p.cow_id)).cow_id
    assert out[0].control_cow_id == expected == "near"


def test_match_excludes_sick_and_uncovered_candidates():
    profiles = [_profile("case", 1, "open", 30), _profile("sick", 1, "open", 30), _profile("gap", 1, "open", 30), _profile("ok", 1, "open", 90)]
    beh = behavior_rows("sick", range(15)) + behavior_rows("gap", [d for d in range(15) if d != 8]) + behavior_rows("ok", range(15))
    les = lesion_rows("sick", {40: "active"})
    out = match_controls([_episode()], profiles, beh, les)
    assert out[0].control_cow_id == "ok"


def test_match_is_one_to_one_in_day0_order():
    profiles = [_profile("a", 1, "open", 30), CowProfile("b", 1, "open", day(12 - 31)), _profile("ctl", 1, "open", 30)]
    beh = behavior_rows("ctl", range(20))
    out = match_controls([Episode("b", day(12)), Episode("a", day(10))], profiles, beh)
    by_case = {e.case_cow_id: e.control_cow_id for e in out}
    assert by_case == {"a": "ctl", "b": None}


def test_grouped_split_ten_cows():
    rng = np.random.default_rng(0)
    m = random_matrix(rng, 10)
    train, test = grouped_split(m, 0.2, seed=7)
    assert len(test.unique_groups()) == 2 and len(train.unique_groups()) == 8
    assert not set(train.groups) & set(test.groups)
    assert train.n_rows + test.n_rows == m.n_rows
    again = grouped_split(m, 0.2, seed=7)
    assert np.array_equal(again[1].X, test.X) and list(again[1].groups) == list(test.groups)


def test_grouped_split_errors():
    m = FeatureMatrix(["f"], [[1.0], [2.0]], [0, 1], ["a", "a"])
    with pytest.raises(ValueError, match="insufficient groups"):
        grouped_split(m, 0.2, 0)
    with pytest.raises(ValueError):
        grouped_split(random_matrix(np.random.default_rng(0), 5), 1.0, 0)


def test_grouped_split_stratified_keeps_positive_groups_on_both_sides():
    rng = np.random.default_rng(3)
    groups = [f"p{i}" for i in range(10)] + [f"n{i}" for i in range(10)]
    m = FeatureMatrix(["f"], rng.normal(size=(20, 1)), [1] * 10 + [0] * 10, groups)
    train, test = grouped_split(m, 0.2, 1, stratify=True)
    assert test.y.sum() == 2 and (test.y == 0).sum() == 2


@pytest.mark.parametrize("n_groups, sizes", [(10, [2, 2, 2, 2, 2]), (11, [3, 2, 2, 2, 2])])
def test_grouped_kfold_sizes(n_groups, sizes):
    m = random_matrix(np.random.default_rng(n_groups), n_groups)
    folds = grouped_kfold(m, 5, seed=1)
    assert [len(v.unique_groups()) for _, v in folds] == sizes
    val_sets = [set(v.unique_groups()) for _, v in folds]
    assert set().union(*val_sets) == set(m.unique_groups())
    for i in range(5):
        for j in range(i + 1, 5):
            assert not val_sets[i] & val_sets[j]
    for tr, va in folds:
        assert not set(tr.groups) & set(va.groups)


def test_grouped_kfold_too_many_folds():
    with pytest.raises(ValueError):
        grouped_kfold(random_matrix(np.random.default_rng(0), 4), 5, 0)


def test_feature_matrix_rejects_bad_input():
    with pytest.raises(ValueError):
        FeatureMatrix(["a"], [[np.nan]], [0], ["g"])
    with pytest.raises(ValueError):
        FeatureMatrix(["a", "b"], [[1.0]], [0], ["g"])
    with pytest.raises(ValueError):
        FeatureMatrix(["a"], [[1.0]], [2], ["g"])
