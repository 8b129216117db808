from collections import Counter

import numpy as np
import pytest

from diffmamba.errors import DataError
from diffmamba.model import build_model, stack_specs
from diffmamba.needle import (
    NEEDLE_TEMPLATES,
    NeedleTask,
    answer_loss,
    answer_probabilities,
    generate_needle_dataset,
    make_task,
    needle_grid,
    needle_sentence,
    prompt_batch,
    read_jsonl,
    write_jsonl,
)


def test_templates_disjoint():
    sets = [set(t.replace("{answer}", "")) for t in NEEDLE_TEMPLATES]
    assert not sets[0] & sets[1]


@pytest.mark.parametrize("answer", range(256))
def test_every_byte_is_a_valid_answer(answer):
    task = make_task(b"filler text " * 50, 64, "middle", answer, np.random.default_rng(0))
    assert task.context.encode("latin-1").count(bytes([answer])) == 1
    assert len(task.context) == 64


def test_context_equal_to_needle_is_filler_free():
    needle = needle_sentence(ord("7"))
    task = make_task(b"", len(needle), "begin", ord("7"), np.random.default_rng(0))
    assert task.context.encode("latin-1") == needle


def test_context_shorter_than_needle():
    with pytest.raises(DataError):
        make_task(b"abc" * 10, 5, "end", ord("x"), np.random.default_rng(0))


def test_positions():
    rng = np.random.default_rng(0)
    filler = b"lorem ipsum dolor sit amet " * 20
    needle = needle_sentence(ord("Q"))
    room = 100 - len(needle)
    for pos, at in (("begin", 0), ("middle", room // 2), ("end", room)):
        t = make_task(filler, 100, pos, ord("Q"), rng)
        assert t.insert_at == at
        assert t.context.encode("latin-1")[at : at + len(needle)] == needle


def test_empty_dataset(tmp_path):
    assert generate_needle_dataset(0, [64]) == []
    path = write_jsonl(tmp_path / "e.jsonl", [])
    assert read_jsonl(path) == []


def test_strata_balanced():
    tasks = generate_needle_dataset(2000, [64, 128, 256, 512], seed=3)
    counts = Counter((t.context_length, t.position) for t in tasks)
    assert len(counts) == 12 and max(counts.values()) - min(counts.values()) <= 1


def test_jsonl_round_trip_and_determinism(tmp_path):
    tasks = generate_needle_dataset(30, [64, 96], seed=2)
    assert read_jsonl(write_jsonl(tmp_path / "n.jsonl", tasks)) == tasks
    assert generate_needle_dataset(30, [64, 96], seed=2) == tasks
    line = (tmp_path / "n.jsonl").read_text().splitlines()[0]
    assert '"prompt": "<context>' in line


def test_prompt_layout():
    t = generate_needle_dataset(1, [64])[0]
    assert t.prompt.startswith("<context>") and t.prompt.endswith("</context>Question:What is the secret code? Answer:")
    ids, read = prompt_batch([t])
    assert read[0] == len(t.prompt) - 1 and ids[0, read[0]] == ord(":")


def test_answer_scoring(rng):
    m = build_model(stack_specs("mamba", 1, d_state=4), 16)
    tasks = generate_needle_dataset(6, [64, 80], seed=0)
    p = answer_probabilities(m, tasks, batch_size=4)
    assert p.shape == (6,) and ((p > 0) & (p < 1)).all()
    loss = float(answer_loss(m, tasks).data)
    assert loss == pytest.approx(-np.mean(np.log(p)), rel=1e-4)
    grid = needle_grid(m, tasks)
    assert set(grid) == {"begin", "middle", "end"} and set(grid["begin"]) == {"64", "80"}
