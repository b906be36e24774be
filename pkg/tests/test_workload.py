import json
import random

import pytest

from conftest import lcp_len
from prefixbatch import (
    ParseError,
    Request,
    SyntheticSpec,
    ValidationError,
    Workload,
    generate_microbenchmark,
    read_workload,
    shuffle_workload,
    write_workload,
)


class TestGenerateMicrobenchmark:
    def test_paper_scale_counts(self):
        w = generate_microbenchmark(SyntheticSpec(2000, 200, 16, 400, 100, 7))
        assert len(w) == 6400
        assert all(r.prompt_len == 2200 for r in w.requests)
        assert all(r.output_len == 100 for r in w.requests)

    def test_degenerate_single_request(self):
        w = generate_microbenchmark(SyntheticSpec(10, 5, 1, 1, 1, 3))
        assert len(w) == 1
        assert w.requests[0].prompt_len == 15

    def test_small_spec_lcp_structure(self):
        w = generate_microbenchmark(SyntheticSpec(8, 2, 3, 2, 4, 9))
        assert len(w) == 6
        by_group = {}
        for r in w.requests:
            by_group.setdefault(r.id.split("_")[0], []).append(r)
        for members in by_group.values():
            for i in range(len(members)):
                for j in range(i + 1, len(members)):
                    assert lcp_len(members[i].tokens, members[j].tokens) == 8
        for a in by_group["g0"]:
            for b in by_group["g1"]:
                assert lcp_len(a.tokens, b.tokens) == 0

    def test_deterministic_for_fixed_seed(self):
        spec = SyntheticSpec(15, 4, 2, 3, 5, 42)
        assert generate_microbenchmark(spec) == generate_microbenchmark(spec)

    def test_seed_changes_tokens(self):
        a = generate_microbenchmark(SyntheticSpec(15, 4, 2, 3, 5, 1))
        b = generate_microbenchmark(SyntheticSpec(15, 4, 2, 3, 5, 2))
        assert a.requests[0].tokens != b.requests[0].tokens

    @pytest.mark.parametrize("seed", range(12))
    def test_lcp_structure_random_shapes(self, seed):
        rng = random.Random(seed)
        spec = SyntheticSpec(
            prefix_len=rng.randint(1, 20),
            distinct_len=rng.randint(1, 10),
            sharing_degree=rng.randint(1, 5),
            num_groups=rng.randint(1, 5),
            output_len=rng.randint(1, 8),
            seed=rng.randrange(2**63),
        )
        w = generate_microbenchmark(spec)
        assert len(w) == spec.num_groups * spec.sharing_degree
        reqs = w.requests
        for i in range(len(reqs)):
            for j in range(i + 1, len(reqs)):
                same_group = reqs[i].id.split("_")[0] == reqs[j].id.split("_")[0]
                expected = spec.prefix_len if same_group else 0
                assert lcp_len(reqs[i].tokens, reqs[j].tokens) == expected

    def test_tokens_fit_32_bits(self):
        w = generate_microbenchmark(SyntheticSpec(50, 10, 2, 2, 1, 123))
        for r in w.requests:
            assert all(0 <= t < 2**32 for t in r.tokens)

    @pytest.mark.parametrize("bad", [
        dict(prefix_len=0), dict(distinct_len=0), dict(sharing_degree=0),
        dict(num_groups=0), dict(output_len=0),
    ])
    def test_invalid_spec_rejected(self, bad):
        kwargs = dict(prefix_len=4, distinct_len=2, sharing_degree=2,
                      num_groups=2, output_len=3, seed=0)
        kwargs.update(bad)
        with pytest.raises(ValidationError):
            SyntheticSpec(**kwargs)


class TestShuffle:
    def test_empty_workload(self):
        assert shuffle_workload(Workload([]), 5) == Workload([])

    def test_permutation_preserves_multiset(self):
        w = generate_microbenchmark(SyntheticSpec(5, 3, 4, 4, 2, 8))
        shuffled = shuffle_workload(w, 99)
        assert sorted(r.id for r in shuffled.requests) == sorted(r.id for r in w.requests)
        assert {r.id: r for r in shuffled.requests} == {r.id: r for r in w.requests}

    def test_deterministic(self):
        w = generate_microbenchmark(SyntheticSpec(5, 3, 4, 4, 2, 8))
        assert shuffle_workload(w, 7) == shuffle_workload(w, 7)

    def test_actually_reorders(self):
        w = generate_microbenchmark(SyntheticSpec(5, 3, 4, 10, 2, 8))
        shuffled = shuffle_workload(w, 7)
        assert [r.id for r in shuffled.requests] != [r.id for r in w.requests]


class TestWorkloadIO:
    def test_round_trip(self, tmp_path):
        w = generate_microbenchmark(SyntheticSpec(9, 4, 3, 3, 6, 17))
        path = tmp_path / "w.jsonl"
        write_workload(w, str(path))
        assert read_workload(str(path)) == w

    def test_file_order_preserved(self, tmp_path):
        path = tmp_path / "w.jsonl"
        records = [
            {"id": "b", "tokens": [3, 4], "output_len": 2},
            {"id": "a", "tokens": [1], "output_len": 1},
        ]
        path.write_text("".join(json.dumps(r) + "\n" for r in records))
        w = read_workload(str(path))
        assert [r.id for r in w.requests] == ["b", "a"]
        assert w.requests[0].tokens == (3, 4)

    def test_missing_output_len_names_line(self, tmp_path):
        path = tmp_path / "w.jsonl"
        path.write_text('{"id": "a", "tokens": [1], "output_len": 1}\n'
                        '{"id": "b", "tokens": [2]}\n')
        with pytest.raises(ParseError) as err:
            read_workload(str(path))
        assert err.value.line == 2
        assert "output_len" in str(err.value)

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "w.jsonl"
        path.write_text('{"id": "a", "tokens": [1], "output_len": 1}\nnot json\n')
        with pytest.raises(ParseError) as err:
            read_workload(str(path))
        assert err.value.line == 2

    @pytest.mark.parametrize("record", [
        {"id": "", "tokens": [1], "output_len": 1},
        {"id": "a", "tokens": [], "output_len": 1},
        {"id": "a", "tokens": [-1], "output_len": 1},
        {"id": "a", "tokens": [2**32], "output_len": 1},
        {"id": "a", "tokens": [1.5], "output_len": 1},
        {"id": "a", "tokens": [1], "output_len": 0},
        {"id": "a", "tokens": [1], "output_len": True},
    ])
    def test_malformed_records(self, tmp_path, record):
        path = tmp_path / "w.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(ParseError):
            read_workload(str(path))

    def test_duplicate_id_is_validation_error(self, tmp_path):
        path = tmp_path / "w.jsonl"
        path.write_text('{"id": "a", "tokens": [1], "output_len": 1}\n'
                        '{"id": "a", "tokens": [2], "output_len": 1}\n')
        with pytest.raises(ValidationError):
            read_workload(str(path))

    def test_request_validation(self):
        with pytest.raises(ValidationError):
            Request("r", (), 1)
        with pytest.raises(ValidationError):
            Request("r", (1,), 0)
