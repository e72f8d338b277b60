"""Prefix equations: parsing, evaluation, failure modes, and how many ways one answer can be written."""
from divkd import expr

quantities = (3.0, 5.0, 2.0)
eq = expr.infix_to_prefix("N0 * (N1 + N2)")
print("infix  N0 * (N1 + N2)  ->  prefix", expr.format_prefix(eq))
print("value with", quantities, "=", expr.evaluate(eq, quantities).value)

# Evaluation never raises; problems come back as a defect tag.
for bad in ("÷ N0 − N1 N1", "+ N0 N7", "+ N0", "^ 10 999"):
    out = expr.evaluate(expr.parse_prefix(bad), quantities)
    print(f"{bad:14s} -> {out.defect.value}")

# Answer matching is relative above 1 and absolute below.
for pred, gold in ((21.0015, 21.0), (21.003, 21.0), (0.00005, 0.0)):
    print(f"answers_match({pred}, {gold}) = {expr.answers_match(pred, gold)}")

# Several token sequences reach the same answer; a solver that proposes
# more of them in its beam is the more diverse one.
same = expr.correct_equations(7, quantities, 21.0, operators=("+", "×"))
print(f"\n{len(same)} equations of at most 7 tokens evaluate to 21:")
for e in same:
    print("  ", expr.format_prefix(e), "  =  ", expr.prefix_to_infix(e))
