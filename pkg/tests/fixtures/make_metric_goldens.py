"""Regenerate metric_goldens.json from the reference implementations.

Requires pycocoevalcap (CIDEr-D, ROUGE-L) and nltk (BLEU-4) on PYTHONPATH;
neither is a dependency of the package itself. Run from the repo root:

    PYTHONPATH=/path/to/refmetrics python3 tests/fixtures/make_metric_goldens.py
"""

import json
from pathlib import Path

from nltk.translate.bleu_score import sentence_bleu
from pycocoevalcap.cider.cider import Cider
from pycocoevalcap.rouge.rouge import Rouge

OUT = Path(__file__).with_name("metric_goldens.json")

SENTENCE_CASES = [
    ("this is a red chair . it is left of the blue table .",
     ["this is a red chair . it is right of the blue table .",
      "this is a red chair . it is left of the blue table and behind the blue table ."]),
    ("this is a green lamp . it is above the brown box .",
     ["this is a green lamp . it is above the brown box and in front of the brown box ."]),
    ("a c d", ["a b c d"]),
    ("the red chair is left of the blue table today", ["the red chair is right of the blue table today"]),
    ("the cat sat on the mat", ["the cat is on the mat", "there is a cat on the mat"]),
    ("it is a white sofa next to the black bed",
     ["this is a white sofa . it is next to the black bed .", "a white sofa sits next to a black bed"]),
]

CIDER_CORPUS = [
    ("this is a red chair . it is left of the blue table .",
     ["this is a red chair . it is left of the blue table .",
      "this is a red chair . it is behind the blue table ."]),
    ("this is a blue table . it is right of the red chair .",
     ["this is a blue table . it is right of the red chair ."]),
    ("this is a brown box . it is above the white shelf .",
     ["this is a brown box . it is above the white shelf and left of the white shelf ."]),
    ("this is a white shelf . it is below the brown box .",
     ["this is a black shelf . it is left of the brown box ."]),
]


def main():
    bleu, rouge = [], []
    scorer = Rouge()
    for cand, refs in SENTENCE_CASES:
        c = cand.split()
        r = [x.split() for x in refs]
        value = sentence_bleu(r, c)
        # unsmoothed reference: only cases with matches at every n-gram order are comparable
        if value > 1e-3:
            bleu.append({"candidate": c, "references": r, "value": value})
        rouge.append({"candidate": c, "references": r, "value": scorer.calc_score([cand], refs)})
    gts = {k: refs for k, (_, refs) in enumerate(CIDER_CORPUS)}
    res = {k: [cand] for k, (cand, _) in enumerate(CIDER_CORPUS)}
    mean, per = Cider().compute_score(gts, res)
    cider = {"candidates": [c.split() for c, _ in CIDER_CORPUS],
             "references": [[x.split() for x in refs] for _, refs in CIDER_CORPUS],
             "mean": float(mean), "scores": [float(s) for s in per]}
    doc = {"source": "nltk 3.10 sentence_bleu (default weights, no smoothing); "
                     "pycocoevalcap 1.2 Rouge (beta 1.2) and Cider (CIDEr-D, sigma 6)",
           "bleu4": bleu, "rouge_l": rouge, "cider_d": cider}
    OUT.write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main()
