"""Walk one phantom through the pipeline: maps, candidates, cascade, detections.

Trains a small cascade on 24 phantoms first (about a minute on one core).

    python3 demos/phantom_walkthrough.py
"""
from dataclasses import replace

from mccad.cascade import prepare_case, run_cascade, train_cascade
from mccad.classifier import ForestConfig
from mccad.evaluation import match_detections, synth_dataset
from mccad.params import PipelineParams, TrainConfig
from mccad.phantom import PhantomSpec, synth_phantom

spec = PhantomSpec(width=320, height=320, n_distractors=2, distractor_clearance_mm=8.0,
                   disk_radius_mm=(2.5, 4.0))
pipeline = PipelineParams()
pipeline = replace(pipeline, objectness=replace(pipeline.objectness, max_candidates=300))

train = synth_dataset(spec, 24, seed=7)
model = train_cascade(train, pipeline, TrainConfig(forest=ForestConfig(n_trees=20), cv_folds=2), seed=3)
for s in model.stages:
    print(f"stage {s.stage}: {s.n_features} features, threshold {s.threshold:.3f}")

img, truths = synth_phantom(replace(spec, seed=2024))
case = prepare_case(img, pipeline)
print(f"\n{img.data.shape[1]}x{img.data.shape[0]} image, {len(truths)} planted group(s), "
      f"{len(case.cands)} candidates")
for c in case.cands[:5]:
    print(f"  candidate at ({c.x:.2f}, {c.y:.2f}) mm, scale {c.scale:.1f} mm, response {c.response:.3f}")

r = run_cascade(model, case=case)
print("\nsurvivors:", r.counts)
m = match_detections([h.centroid(r.cands) for h in r.detections], truths)
for h, t in zip(r.detections, m.det_truth):
    x, y, _ = h.centroid(r.cands)
    tag = "hit" if t >= 0 else "false positive"
    print(f"  group of {len(h.member_ids)} at ({x:.1f}, {y:.1f}) mm, p={h.prob:.3f} -> {tag}")
