"""Compare analytic gradients with finite differences for every layer op and
for a tiny UNet++."""
from unetlab.arch import ArchSpec
from unetlab.gradcheck import OP_CHECKS, check_net, check_op

for op in OP_CHECKS:
    rep = check_op(op, seed=0)
    print(f"{op:12s} max rel. error {rep.max_rel_error:.2e} {'ok' if rep.passed else 'FAILED'}")

rep = check_net(ArchSpec("unet_pp", 2, (2, 4, 8), 1, True, (1, 16, 16)), seed=0)
print(f"{'unet_pp d=2':12s} max rel. error {rep.max_rel_error:.2e} {'ok' if rep.passed else 'FAILED'}")
