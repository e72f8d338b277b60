"""Train a small teacher, verify its beams, and distil a latent-variable student.

Pass an epoch count as the first argument (default 8) for a longer run.
"""
import sys

import numpy as np

from divkd import corpus, distill, expr, metrics, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
c = corpus.generate_toy_corpus(800, seed=2)
tr, dv, te = corpus.split(c, (0.8, 0.1, 0.1), seed=2)
cfg = train.TrainConfig(epochs=epochs, seed=2, hidden_dim=32, embed_dim=16, latent_dim=16,
                        kl_anneal_epochs=max(1, epochs // 4))
mcfg = train.model_config(tr, cfg)

teacher = train.pretrain_teacher(tr, dv, cfg, mcfg)
print(f"teacher: best epoch {teacher.meta['best_epoch']}, dev accuracy {teacher.meta['dev_answer_accuracy']:.3f}")

# Each beam entry is checked by evaluating it against the gold answer.
problems = te.problems[:4]
beams = distill.teacher_beams(teacher, mcfg, problems, K=5, max_len=cfg.max_len)
for p, beam in zip(problems, beams):
    vb = distill.verify_beam(beam, p, cfg.distill, te.constants)
    print(f"\n{' '.join(corpus.raw_words(p))}\n  gold {expr.prefix_to_infix(p.gold_equation)} = {p.gold_answer:g}"
          f"   weight {vb.weight:.3f}")
    for e, ok in zip(beam, vb.correct):
        print(f"  {e.rank}. {'ok' if ok else '  '} {expr.prefix_to_infix(e.equation):22s} {e.log_score:7.2f}")

log = train.RunLog()
student = train.train_student(tr, dv, teacher, cfg, mcfg, runlog=log)
print("\nepoch  nll     kl      hard    soft    kd_pairs  weight  dev")
for r in log.records:
    print(f"{r['epoch']:5d}  {r['nll']:.3f}  {r['kl']:.3f}  {r['hard']:.3f}  {r['soft']:.3f}  "
          f"{r['kd_pairs']:8.1f}  {r['beam_weight']:.3f}   {r['dev_answer_accuracy']:.3f}")

for name, store in (("teacher", teacher), ("student", student)):
    rep = metrics.evaluate(metrics.Solver(store, mcfg, cfg.max_len), te, K=5)
    print(f"{name:8s} test accuracy {rep['answer_accuracy']:.3f}  diversity {rep['diversity_total']}")
print("teacher and student parameter counts:",
      sum(int(np.prod(s)) for s in teacher.shapes().values()),
      sum(int(np.prod(s)) for s in student.shapes().values()))
