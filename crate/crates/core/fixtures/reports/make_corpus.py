"""Generate the synthetic gated-CT report corpus used by tests/report_corpus.rs.

Each line is a report record plus its ground truth:
  expected_status  "extracted" | "not_extractable"
  expected_score   number or null
  expected_reason  "hardware_mention" | "no_score_pattern" | "ambiguous_multiple" | null

Ground truth comes from the template that produced the report, never from
the extractor. Re-running with the same seed rewrites the file identically:

    python3 make_corpus.py > corpus.jsonl
"""
import json
import random
from datetime import date, timedelta

rng = random.Random(20240611)


def fmt_score(v, style):
    if style == "plain":
        return f"{v:g}" if isinstance(v, float) else str(v)
    if style == "comma":
        return f"{v:,}"
    if style == "decimal":
        return f"{v:.1f}"
    raise ValueError(style)


def score_value():
    r = rng.random()
    if r < 0.25:
        return 0
    if r < 0.55:
        return rng.randint(1, 100)
    if r < 0.8:
        return rng.randint(101, 400)
    return rng.randint(401, 4500)


TOTAL_PHRASES = [
    "Total Agatston score: {s}.",
    "The total coronary artery calcium score is {s}.",
    "TOTAL CALCIUM SCORE: {s}",
    "Coronary calcium score (Agatston) = {s}.",
    "Agatston score of {s}.",
    "CAC score: {s}",
    "Total: {s}",
    "The calcium score was {s}.",
    "Total coronary calcium score - {s}",
    "Agatston calcium score is {s}.",
]

VESSEL_NAMES = ["LM", "LAD", "LCx", "RCA", "Left main", "Left anterior descending", "Circumflex", "Right coronary artery", "PDA"]

PREAMBLES = [
    "EXAM: CT CARDIAC CALCIUM SCORING\nINDICATION: Chest pain, risk stratification.\nTECHNIQUE: Prospectively ECG-gated non-contrast CT of the heart, 3 mm slices.",
    "CT CORONARY CALCIUM SCORE\nHISTORY: {age}-year-old with hyperlipidemia.\nTECHNIQUE: Non-contrast gated acquisition at 120 kVp. DLP {dlp} mGy-cm.",
    "PROCEDURE: Coronary artery calcium scan.\nComparison: None.\nHeart rate {hr} bpm during acquisition.",
    "Calcium scoring CT performed on a 64-slice scanner. Images reviewed on workstation.",
]

CLOSINGS = [
    "IMPRESSION: See above. Recommend clinical correlation.",
    "Incidental findings: 4 mm right lower lobe nodule; follow-up per guidelines.",
    "No pericardial effusion. Aortic valve calcification is mild.",
    "Electronically signed by Dr. {doc} on {d}.",
    "",
]

RISK_CATEGORY = {0: "No identifiable plaque.", 100: "Mild plaque burden.", 400: "Moderate plaque burden.", 10**9: "Extensive plaque burden."}


def risk_sentence(v):
    for bound, text in RISK_CATEGORY.items():
        if v <= bound:
            return text


def preamble():
    return rng.choice(PREAMBLES).format(age=rng.randint(40, 85), dlp=rng.randint(40, 200), hr=rng.randint(48, 90))


def closing(d):
    return rng.choice(CLOSINGS).format(doc=rng.choice(["Smith", "Lee", "Garcia", "Okafor"]), d=d.isoformat())


def vessel_lines(total):
    """Per-vessel breakdown summing to the total (a trap for naive matching)."""
    if total == 0:
        parts = [0] * 4
    else:
        cuts = sorted(rng.randint(0, total) for _ in range(3))
        parts = [cuts[0], cuts[1] - cuts[0], cuts[2] - cuts[1], total - cuts[2]]
    names = rng.sample(VESSEL_NAMES, 4)
    style = rng.choice(["colon", "dash", "inline"])
    if style == "colon":
        return "\n".join(f"{n}: {p}" for n, p in zip(names, parts))
    if style == "dash":
        return "\n".join(f"- {n} {p}" for n, p in zip(names, parts))
    return "Vessel scores: " + "; ".join(f"{n} score {p}" for n, p in zip(names, parts)) + "."


def percentile_trap():
    return rng.choice([
        f"This places the patient in the {rng.randint(5, 99)}th percentile for age and sex.",
        f"MESA percentile: {rng.randint(1, 99)}",
        f"Percentile rank {rng.randint(1, 99)} compared to age-matched controls.",
    ])


def extracted_report():
    v = score_value()
    style = rng.choice(["plain", "plain", "comma", "decimal"]) if v >= 1000 else rng.choice(["plain", "plain", "decimal"])
    value = float(f"{v:.1f}") if style == "decimal" else v
    if v == 0 and rng.random() < 0.3:
        s = rng.choice(["0", "zero", "Zero"])
    else:
        s = fmt_score(v, style) if style != "decimal" else fmt_score(float(v), "decimal")
    parts = [preamble()]
    if rng.random() < 0.6:
        parts.append(vessel_lines(v))
    if rng.random() < 0.4:
        parts.insert(rng.randint(1, len(parts)), percentile_trap())
    total_line = rng.choice(TOTAL_PHRASES).format(s=s)
    parts.insert(rng.randint(1, len(parts)), total_line)
    if rng.random() < 0.5:
        parts.append(risk_sentence(v))
    if rng.random() < 0.25:
        # Repeating the same total in the impression is consistent, not ambiguous.
        parts.append(f"IMPRESSION: Total Agatston score {s}.")
    parts.append(closing(date(2015, 1, 1)))
    return "\n".join(p for p in parts if p), "extracted", float(value), None


def hardware_report():
    hw = rng.choice([
        "Coronary stents are present in the LAD.",
        "Status post CABG with LIMA graft to LAD.",
        "Calcium scoring was not performed due to the presence of a stent.",
        "Prior coronary artery bypass surgery; sternotomy wires noted.",
        "Stented segment in the proximal RCA limits evaluation.",
        "Saphenous vein grafts are patent.",
    ])
    parts = [preamble(), hw]
    if rng.random() < 0.6:
        parts.append(rng.choice(TOTAL_PHRASES).format(s=score_value()))
    parts.append(closing(date(2016, 3, 1)))
    return "\n".join(p for p in parts if p), "not_extractable", None, "hardware_mention"


def no_score_report():
    parts = [preamble(), rng.choice([
        "Calcium scoring could not be completed due to motion artifact.",
        "Study limited by image noise; score not reported.",
        "Images are nondiagnostic for calcium quantification.",
    ])]
    if rng.random() < 0.5:
        parts.append(percentile_trap())
    parts.append(closing(date(2017, 5, 9)))
    return "\n".join(p for p in parts if p), "not_extractable", None, "no_score_pattern"


def ambiguous_report():
    a = score_value()
    b = a + rng.randint(5, 300)
    first, second = rng.sample(TOTAL_PHRASES, 2)
    parts = [preamble(), first.format(s=a), "Addendum: values re-measured after reconstruction.", second.format(s=b), closing(date(2018, 8, 8))]
    return "\n".join(parts), "not_extractable", None, "ambiguous_multiple"


def main():
    makers = [extracted_report] * 228 + [hardware_report] * 36 + [no_score_report] * 18 + [ambiguous_report] * 18
    rng.shuffle(makers)
    start = date(2012, 1, 1)
    for i, make in enumerate(makers):
        text, status, score, reason = make()
        print(json.dumps({
            "report_id": f"r{i:04d}",
            "patient_id": f"p{i:04d}",
            "study_uid": f"1.2.840.99.{i}",
            "report_text": text,
            "report_date": (start + timedelta(days=7 * i)).isoformat(),
            "expected_status": status,
            "expected_score": score,
            "expected_reason": reason,
        }))


if __name__ == "__main__":
    main()
