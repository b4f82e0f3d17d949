import numpy as np

from bsvdecide import (Ball, Box, HalfSpace, Intersection, Orthant, distance_sq, grad_distance_sq,
                       hessian_distance_sq, mollified_distance_sq, project)

spacer = "_" * 60

print("\nEvery closed convex set has a nearest-point map. A ball pulls outside points radially:")
ball = Ball([0.0, 0.0], 1.0)
print("project(ball, [2, 0]) =", project(ball, [2.0, 0.0]))
print("project(ball, [0.3, 0.2]) =", project(ball, [0.3, 0.2]), "(already inside)")

print("\nA box clips coordinates, an orthant clips negatives to zero:")
print("project(box, [3, -1]) =", project(Box([0, 0], [1, 1]), [3.0, -1.0]))
print("project(orthant, [-3, 2]) =", project(Orthant(2), [-3.0, 2.0]))

print(spacer)

print("\nIntersections have no closed form, so they go through Dykstra's alternating scheme.")
lens = Intersection([Ball([0.0, 0.0], 1.0), HalfSpace([1.0, 0.0], 0.0)])
print("half-disc projection of (2, 2) =", np.round(project(lens, [2.0, 2.0]), 10))

pts = np.random.default_rng(0).normal(0, 3, (5, 2))
print("\nbatched calls work row by row:")
print(np.round(project(lens, pts), 4))

print(spacer)

print("\nThe squared distance is C^1 with gradient 2 (y - P(y)):")
y = np.array([-2.0, 0.5])
print("d^2 to orthant at", y, "=", distance_sq(Orthant(2), y))
print("gradient =", grad_distance_sq(Orthant(2), y))

print("\nIts Hessian exists almost everywhere and half of it sits between 0 and I:")
est = hessian_distance_sq(ball, [2.0, 1.0])
print("eigenvalues of 1/2 D^2 d^2 at (2, 1):", np.round(est.eigenvalues / 2, 6), "ok:", est.bounds_ok)

print("\nOn the corner of a box the difference quotient averages the two one-sided curvatures:")
est = hessian_distance_sq(Box([0, 0], [1, 1]), [1.0, 1.0])
print("1/2 D^2 d^2 at the corner:", np.round(est.matrix / 2, 6).tolist(), "ok:", est.bounds_ok)

print(spacer)

print("\nSmoothing d^2 with a bump of radius delta never overshoots (d + delta)^2:")
for delta in (0.01, 0.1, 1.0):
    v = mollified_distance_sq(Orthant(1), [-0.05], delta)
    print(f"delta = {delta:<5} value = {v:.6f}  bound = {(0.05 + delta) ** 2:.6f}")
