"""Correct-in-beam counts for teacher and student, with and without latent sampling.

Trains both networks from scratch (a few minutes at the default size).
Pass a seed as the first argument.
"""
import sys

from divkd import corpus, metrics, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
c = corpus.generate_toy_corpus(2000, seed)
tr, dv, te = corpus.split(c, (0.8, 0.1, 0.1), seed)
cfg = train.TrainConfig(seed=seed)
mcfg = train.model_config(tr, cfg)
teacher = train.pretrain_teacher(tr, dv, cfg, mcfg)
student = train.train_student(tr, dv, teacher, cfg, mcfg)

reports = []
for name, store in (("teacher", teacher), ("student", student)):
    solver = metrics.Solver(store, mcfg, cfg.max_len)
    rep = metrics.evaluate(solver, te, K=5, mode="sampled", samples=5, seed=seed)
    rep["name"] = name
    reports.append(rep)
print(metrics.format_table(reports))

# Distinct correct equations per problem, split by how many operators the gold equation has.
for rep in reports:
    print(rep["name"], "by operator count:", rep["diversity_by_operators"],
          " pooled over 5 latent draws:", rep["sampled_diversity_total"])
