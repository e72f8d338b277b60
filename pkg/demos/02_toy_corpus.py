"""The synthetic corpus: what a problem looks like and why the task is not trivial."""
from collections import Counter

from divkd import corpus, expr

c = corpus.generate_toy_corpus(2000, seed=1)
print(f"{len(c)} problems, input vocabulary of {len(c.vocab)} tokens, "
      f"at most {c.max_quantities()} numbers per problem\n")

for p in c.problems[:5]:
    print("text:", " ".join(corpus.raw_words(p)))
    print("      slots", " ".join(p.tokens))
    print("      gold ", expr.prefix_to_infix(p.gold_equation), "=", p.gold_answer, "\n")

# Templates are named by a head word plus a modifier word; some templates
# were annotated with more than one equivalent form.
forms = Counter()
for p in c:
    mod = next(t for t in p.tokens if t in corpus.MODIFIERS)
    forms[(p.tokens[0], mod, expr.operator_count(p.gold_equation))] += 1
print("head  modifier  operators  count")
for (h, m, k), n in sorted(forms.items()):
    print(f"{h:5s} {m:9s} {k:9d}  {n:5d}")

tr, dv, te = corpus.split(c, (0.8, 0.1, 0.1), seed=1)
print(f"\nsplit sizes: train {len(tr)}, dev {len(dv)}, test {len(te)}")
