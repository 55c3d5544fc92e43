import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from typostorm.attackgen import (
    AdversarialAnswer,
    DirectiveSet,
    GenerationExhausted,
    InvalidAttack,
    RetryPolicy,
    TemplateSlotMissing,
    build_attack_prompt,
    default_directives,
    dump_attacks,
    generate_false_answer,
    generate_multi,
    load_attacks,
    load_directives,
    postprocess,
    violation,
)
from typostorm.corpus import TaskKind
from typostorm.metrics import normalize_text, parse_count

from .conftest import make_item


class Scripted:
    """Generator fake returning queued replies and logging prompts."""

    name = "scripted"

    def __init__(self, *replies):
        self.replies = list(replies)
        self.prompts = []

    def __call__(self, system, user):
        self.prompts.append((system, user))
        return self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]


def test_default_directives():
    ds = default_directives()
    assert set(ds.task_templates) == set(TaskKind)
    ctx = ds.context.lower()
    for phrase in ("false answer", "opposite", "plausible", "do not explain"):
        assert phrase in ctx
    for template in ds.task_templates.values():
        user = template.replace("{question}", "How many cars?").replace("{answer}", "4")
        assert "How many cars?" in user and "4" in user


def test_counting_prompt():
    item = make_item()
    system, user = build_attack_prompt(default_directives(), item)
    assert "How many cars are there?" in user and "Correct answer: 4" in user
    assert "different" in user and "count" in user
    assert build_attack_prompt(default_directives(), item) == (system, user)


def test_action_prompt():
    item = make_item(question="What should the car do?", ground_answer="stop",
                     task=TaskKind.ACTION_REASONING)
    _, user = build_attack_prompt(default_directives(), item)
    assert "Correct answer: stop" in user and "opposite driving action" in user


def test_slot_checks(tmp_path):
    with pytest.raises(TemplateSlotMissing):
        DirectiveSet("ctx", {TaskKind.SCENE_REASONING: "Question: {question}"})
    with pytest.raises(TemplateSlotMissing):
        DirectiveSet("ctx", {TaskKind.SCENE_REASONING: "{question} {answer} {answer}"})
    with pytest.raises(ValueError):
        DirectiveSet("  ", {})
    path = tmp_path / "d.json"
    path.write_text(json.dumps({"context": "Be wrong.",
                                "task_templates": {"action_reasoning": "Q={question} A={answer}"}}))
    ds = load_directives(path)
    assert ds.context == "Be wrong."
    assert ds.task_templates[TaskKind.ACTION_REASONING] == "Q={question} A={answer}"
    assert TaskKind.SCENE_REASONING in ds.task_templates


def test_generate_first_try():
    gen = Scripted("7")
    ans = generate_false_answer(gen, default_directives(), make_item())
    assert (ans.text, ans.attempts, ans.generator) == ("7", 1, "scripted")


def test_generate_retries_once():
    gen = Scripted("4", "9")
    ans = generate_false_answer(gen, default_directives(), make_item())
    assert (ans.text, ans.attempts) == ("9", 2)
    assert '"4"' in gen.prompts[1][1] and "Attempt 2" in gen.prompts[1][1]


def test_generate_exhausted():
    gen = Scripted("4")
    with pytest.raises(GenerationExhausted) as err:
        generate_false_answer(gen, default_directives(), make_item(), RetryPolicy(3))
    assert err.value.attempts == 3 and len(gen.prompts) == 3


def test_counting_rejects_number_words_and_multiple_numbers():
    item = make_item()
    assert violation("seven", item)
    assert violation("7 or 8", item)
    assert violation("Four.", item)
    assert violation("4 cars", item)
    assert violation("7 cars", item) is None
    assert violation("x" * 65, make_item(task=TaskKind.ACTION_REASONING, ground_answer="stop"))


def test_postprocess():
    assert postprocess('"go faster"\nBecause the road is clear.') == "go faster"
    assert postprocess("\n\n  'seven'  \n") == "seven"
    assert postprocess("“ok”") == "ok"
    assert postprocess("") == ""


def test_generate_multi_order_and_failures():
    items = [make_item(id=f"q{i}", ground_answer=str(i)) for i in range(3)]
    gen = lambda s, u: str(int(u.split("Correct answer: ")[1].split("\n")[0]) + 5)  # noqa: E731
    batch = generate_multi(gen, default_directives(), items)
    assert [a.qa_id for a in batch.answers] == ["q0", "q1", "q2"]
    assert [a.text for a in batch.answers] == ["5", "6", "7"]
    assert batch.failures == []

    two = [make_item(id="a", ground_answer="4"), make_item(id="b", ground_answer="7")]
    batch = generate_multi(Scripted("7"), default_directives(), two)
    assert [a.qa_id for a in batch.answers] == ["a"]
    assert [f.qa_id for f in batch.failures] == ["b"]
    assert "1 failed" in batch.summary


def test_k1_is_single():
    item = make_item()
    single = generate_false_answer(Scripted("4", "9"), default_directives(), item)
    multi = generate_multi(Scripted("4", "9"), default_directives(), [item]).answers
    assert multi == [single]


def test_generate_multi_rejects_mixed_images():
    with pytest.raises(ValueError):
        generate_multi(Scripted("1"), default_directives(),
                       [make_item(id="a"), make_item(id="b", image_ref="b.png")])


def test_multi_is_byte_stable():
    items = [make_item(id=f"q{i}", ground_answer=str(i)) for i in range(4)]
    gen = lambda s, u: str(len(u) % 97 + 20)  # noqa: E731
    a = dump_attacks(generate_multi(gen, default_directives(), items).answers)
    b = dump_attacks(generate_multi(gen, default_directives(), items).answers)
    assert a == b


def test_manual_answer_validation():
    with pytest.raises(InvalidAttack):
        AdversarialAnswer.create(make_item(), "4")
    ok = AdversarialAnswer.create(make_item(), "12")
    assert ok.generator == "manual"


def test_attacks_file_round_trip(tmp_path):
    answers = [AdversarialAnswer("q1", "7", 1, "gen"), AdversarialAnswer("q2", "go faster", 2, "gen")]
    path = tmp_path / "attacks.jsonl"
    path.write_text(dump_attacks(answers))
    assert json.loads(path.read_text().splitlines()[0]) == {
        "qa_id": "q1", "text": "7", "attempts": 1, "generator": "gen"}
    assert list(load_attacks(path).values()) == answers


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 30), st.text(alphabet="0123456789 abc\n\"", max_size=20))
def test_produced_answers_differ_from_truth(truth, reply):
    item = make_item(ground_answer=str(truth))
    try:
        ans = generate_false_answer(lambda s, u: reply, default_directives(), item, RetryPolicy(1))
    except GenerationExhausted:
        return
    assert normalize_text(ans.text) != normalize_text(item.ground_answer)
    n = parse_count(ans.text)
    assert n is None or n != truth
    assert len([t for t in ans.text.split() if t.isdigit()]) <= 1
