"""
From dictated findings to detector prompts
==========================================

A radiologist's free-text findings are turned into one of four classes
(glioma, meningioma, pituitary, healthy) plus the phrase that decided it.
"""

from promptseg.clinical_prompt import Transcript, extract, load_rules, load_vocabulary

# The bundled vocabulary maps synonyms onto the canonical tumor classes, and the
# rule pack holds global "no tumor" cues plus NegEx-style trigger phrases.
vocab = load_vocabulary()
rules = load_rules()

transcripts = [
    "Large enhancing mass in the left temporal lobe consistent with glioblastoma.",
    "Extra-axial dural-based lesion along the falx, most likely a meningioma.",
    "No evidence of tumor. Ventricles are normal in size.",
    "Meningioma is ruled out; there is a pituitary macroadenoma.",
    "Findings suggest a glioplaston in the right frontal lobe.",
]

for i, text in enumerate(transcripts):
    out = extract(Transcript(f"case{i}", text), vocab, rules)
    print(f"{out.class_label:<11} negated={out.negated!s:<5} evidence={out.evidence!r:<28} prompt={out.prompt!r}")

# The misspelled last case stays healthy: only exact vocabulary entries count.
# Its evidence still points at the suspicious token so a reviewer can spot it.
