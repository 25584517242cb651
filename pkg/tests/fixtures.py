"""Hand-built fixtures shared by the unit and acceptance suites."""

from __future__ import annotations

from crpo_lab.benchmark import MCQ, HumanLabel
from crpo_lab.core import DIMENSIONS, Dimension, Judgment, Mode, Verdict

MEDDIAGNOSE_RATES = {"gpt-4o": 94, "o1": 89, "gemini": 54, "qwen2.5vl-72b": 86, "internvl3": 83, "lingshu": 98}
CMTMEDQA_RATES = {"gpt-4o": 83, "o1": 73, "gemini": 72, "qwen2.5vl-72b": 54, "internvl3": 55, "lingshu": 71}


def win_rate_judgments(rates_pct: dict[str, int], n: int = 100, prefix: str = "item") -> list[Judgment]:
    """``rate`` all-dimension wins and ``n - rate`` losses per baseline."""
    out = []
    for name, rate in rates_pct.items():
        for i in range(n):
            v = Verdict.WIN if i < rate else Verdict.LOSS
            out.append(
                Judgment(f"{prefix}-{i:03d}", "subject", name, Mode.PAIRWISE,
                         {d: v for d in DIMENSIONS}, "fixture")
            )
    return out


def pairwise(item, baseline, verdicts, overall=None) -> Judgment:
    return Judgment(item, "subject", baseline, Mode.PAIRWISE, dict(zip(DIMENSIONS, verdicts)),
                    "fixture", overall=overall)


# --- MCQ ----------------------------------------------------------------------

DIAG = MCQ({"A": "Viral conjunctivitis", "B": "Bacterial keratitis",
            "C": "Acute angle-closure glaucoma", "D": "Allergic reaction"}, "B")
DIAG5 = MCQ({"A": "Iron deficiency", "B": "Vitamin B12 deficiency", "C": "Thalassemia trait",
             "D": "Chronic kidney disease", "E": "Hemolysis"}, "E")
PLAN = MCQ({"A": "Start oral amoxicillin for seven days", "B": "Refer urgently to ophthalmology",
            "C": "Apply topical corticosteroid cream twice daily",
            "D": "Reassure and observe without treatment"}, "A")


def _with_gold(mcq: MCQ, gold: str) -> MCQ:
    return MCQ(dict(mcq.options), gold)


# (response, mcq, expected stage, expected letter, expected correct)
MCQ_CASES = [
    # stage 1: letter forms
    ("The answer is (B).", _with_gold(DIAG, "B"), 1, "B", True),
    ("B", _with_gold(DIAG, "B"), 1, "B", True),
    ("Answer: C", _with_gold(DIAG, "A"), 1, "C", False),
    ("I would pick option D.", _with_gold(DIAG, "D"), 1, "D", True),
    ("(A) is the best choice here", _with_gold(DIAG, "A"), 1, "A", True),
    ("the answer is a", _with_gold(DIAG, "A"), 1, "A", True),
    ("Choice (C), because the pressure is high.", _with_gold(DIAG, "C"), 1, "C", True),
    ("**D**", _with_gold(DIAG, "B"), 1, "D", False),
    ("After weighing everything, the answer is E.", DIAG5, 1, "E", True),
    ("Given the smear, (B) fits best, although (C) is possible.", _with_gold(DIAG5, "B"), 1, "B", True),
    # stage 2: paraphrases
    ("You should start oral amoxicillin for about seven days.", PLAN, 2, "A", True),
    ("Refer urgently to ophthalmology", _with_gold(PLAN, "B"), 2, "B", True),
    ("Put some topical corticosteroid cream on twice daily.", _with_gold(PLAN, "C"), 2, "C", True),
    ("Just reassure the patient and observe, no treatment needed.", _with_gold(PLAN, "D"), 2, "D", True),
    ("Amoxicillin orally for seven days should be started.", _with_gold(PLAN, "B"), 2, "A", False),
    ("An urgent referral to ophthalmology is warranted.", _with_gold(PLAN, "B"), 2, "B", True),
    ("Cream with corticosteroid, applied twice daily.", _with_gold(PLAN, "C"), 2, "C", True),
    ("Observe without treatment for now.", _with_gold(PLAN, "D"), 2, "D", True),
    ("Seven days of oral amoxicillin.", PLAN, 2, "A", True),
    ("Refer to ophthalmology urgently, do not delay", _with_gold(PLAN, "C"), 2, "B", False),
    # adversarial: near-miss letter forms and no shared words
    ("I am not sure, please see a doctor.", DIAG, None, None, False),
    ("The answer depends on further tests.", DIAG, None, None, False),
    ("Answer: depends on history", DIAG, None, None, False),
    ("Option b12 in the old numbering", DIAG, None, None, False),
    ("(E)", DIAG, None, None, False),
    ("Choice is hard here.", DIAG, None, None, False),
    ("", DIAG, None, None, False),
    ("¯\\_(ツ)_/¯", DIAG, None, None, False),
    ("Answer is about 50 mg daily", DIAG, None, None, False),
    ("Nothing listed matches my opinion.", DIAG, None, None, False),
]


# --- expert agreement ---------------------------------------------------------


def consistency_fixture():
    """50 accuracy labels with 43 agreements, plus a few on other keys."""
    judgments, labels = [], []
    for i in range(50):
        judgments.append(pairwise(f"it{i:02d}", "gpt-4o", [Verdict.WIN] * 4))
        labels.append(HumanLabel(f"it{i:02d}", "gpt-4o", Dimension.ACCURACY, i < 43))
    # usefulness: 3 of 4 agree; overall: 1 of 2
    for i, agree in enumerate([True, True, False, True]):
        labels.append(HumanLabel(f"it{i:02d}", "gpt-4o", Dimension.USEFULNESS, agree))
    labels.append(HumanLabel("it10", "gpt-4o", None, True))
    labels.append(HumanLabel("it11", "gpt-4o", None, False))
    return judgments, labels


# --- PII ----------------------------------------------------------------------


def pii_cases(n: int = 200) -> list[str]:
    """Deterministic mix of PII-bearing and clean sentences."""
    import random

    rnd = random.Random(1234)
    names = ["Zhang", "Li", "Smith", "Garcia", "Okafor", "Nguyen", "Müller"]
    honorifics = ["Mr.", "Mrs.", "Ms.", "Dr.", "Mr", "Dr"]
    shapes = [
        lambda: f"call {rnd.randint(200, 999)}-{rnd.randint(0, 9999):04d}",
        lambda: f"my phone is 1{rnd.choice('3578')}{rnd.randint(0, 999999999):09d}",
        lambda: f"reach me at +1 ({rnd.randint(200, 999)}) {rnd.randint(200, 999)}-{rnd.randint(0, 9999):04d}",
        lambda: f"email {rnd.choice(names).lower()}.{rnd.randint(1, 99)}@example.org please",
        lambda: f"born on {rnd.randint(1, 28):02d}/{rnd.randint(1, 12):02d}/{rnd.randint(1940, 2015)}",
        lambda: f"DOB: {rnd.randint(1940, 2015)}-{rnd.randint(1, 12):02d}-{rnd.randint(1, 28):02d}",
        lambda: f"date of birth March {rnd.randint(1, 28)}, {rnd.randint(1940, 2015)}",
        lambda: f"ID {rnd.randint(10**17, 10**18 - 1)}",
        lambda: f"SSN {rnd.randint(100, 899)}-{rnd.randint(10, 99)}-{rnd.randint(1000, 9999)}",
        lambda: f"{rnd.choice(honorifics)} {rnd.choice(names)} said the rash itches",
        lambda: "the rash has been there for two weeks",
        lambda: f"I took {rnd.randint(1, 4)} tablets of 200 mg ibuprofen",
        lambda: f"temperature 38.{rnd.randint(0, 9)} C since yesterday",
    ]
    out = []
    for _ in range(n):
        k = rnd.randint(1, 3)
        out.append("; ".join(rnd.choice(shapes)() for _ in range(k)))
    return out


# --- CLI inputs ---------------------------------------------------------------


def write_benchmark(directory, rates_pct: dict[str, int], n: int = 100, subset: str = "meddiagnose",
                    prefix: str = "md"):
    """Dialogue items whose subject beats baseline b on exactly ``rates_pct[b]`` of ``n`` items.

    The baseline responses go to ``<directory>/baselines/<name>.jsonl``.
    Returns ``(benchmark path, baselines dir)``.
    """
    import json
    from pathlib import Path

    from crpo_lab.core import ConsultationQuery, Response

    directory = Path(directory)
    base_dir = directory / "baselines"
    base_dir.mkdir(parents=True, exist_ok=True)
    bench = directory / "benchmark.jsonl"
    with bench.open("a", encoding="utf-8") as fh:
        for i in range(n):
            qid = f"{prefix}-{i:03d}"
            q = ConsultationQuery.single_turn(qid, f"case {i}", subset=subset)
            item = {"query": q.to_dict(),
                    "subject_response": Response(qid, f"subject on {qid}", "subject", (0.9,) * 4).to_dict(),
                    "kind": "dialogue"}
            fh.write(json.dumps(item) + "\n")
    for name, rate in rates_pct.items():
        with (base_dir / f"{name}.jsonl").open("a", encoding="utf-8") as fh:
            for i in range(n):
                qid = f"{prefix}-{i:03d}"
                q = 0.3 if i < rate else 0.95
                fh.write(json.dumps(Response(qid, f"{name} on {qid}", name, (q,) * 4).to_dict()) + "\n")
    return bench, base_dir
