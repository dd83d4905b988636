"""The caption metric suite on a small worked corpus.

Run: python3 demos/06_caption_metrics.py
"""

import numpy as np

from got.infer_eval import MetricReport, bleu_n, cider, r_at_1, rouge_l

candidates = [
    "a small red square sits alone".split(),
    "a big blue circle near the edge".split(),
    "two green triangles touch gently".split(),
]
references = [
    ["a small red square sits quietly".split(), "a red square rests alone".split()],
    ["a large blue circle near the edge".split()],
    ["two green triangles touch softly".split(), "a pair of green triangles touch gently".split()],
]

print("candidates vs reference sets:")
for cand, refs in zip(candidates, references):
    print(f"  {' '.join(cand)!r}  <-  {[' '.join(r) for r in refs]}")

print("\ncorpus scores:")
bleu = {n: bleu_n(candidates, references, n) for n in (1, 2, 3, 4)}
for n, v in bleu.items():
    print(f"  Bleu_{n}  = {v:.4f}")
print(f"  ROUGE_L = {rouge_l(candidates, references):.4f}")
print(f"  CIDEr   = {cider(candidates, references):.4f}")

print("\nidentical corpus hits every maximum:")
ident_refs = [[c] for c in candidates]
print(f"  Bleu_4 = {bleu_n(candidates, ident_refs, 4):.1f}, "
      f"ROUGE_L = {rouge_l(candidates, ident_refs):.1f}, "
      f"CIDEr = {cider(candidates, ident_refs):.1f}")

print("\nretrieval accuracy (R@1): chosen box counts if IoU >= 0.5")
pairs = [
    ((10, 10, 30, 30), (10, 10, 30, 30)),   # exact
    ((10, 10, 30, 30), (12, 12, 32, 32)),   # close enough
    ((10, 10, 30, 30), (40, 40, 60, 60)),   # miss
    ((0, 0, 10, 10), (6, 0, 16, 10)),       # IoU 0.25, miss
]
print(f"  R@1 over {len(pairs)} queries = {r_at_1(pairs):.2f}")

report = MetricReport(bleu=bleu, rouge_l=rouge_l(candidates, references),
                      cider=cider(candidates, references),
                      corpus={"images": 3, "candidates": 3, "matched": 3})
print("\nreport as a table (METEOR is declared absent, never approximated):")
print(report.to_table())
