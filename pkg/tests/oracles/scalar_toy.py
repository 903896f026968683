"""Hand chain rule for L = (theta * phi * x - y)^2, one inner step then one outer step."""


def dl_dphi(theta, phi, x, y):
    return 2.0 * (theta * phi * x - y) * theta * x


def dl_dtheta(theta, phi, x, y):
    return 2.0 * (theta * phi * x - y) * phi * x


def meta_step(phi, theta, x, y, lr, K):
    for _ in range(K):
        phi = phi - lr * dl_dphi(theta, phi, x, y)
    theta = theta - lr * dl_dtheta(theta, phi, x, y)
    return phi, theta


def joint_step(phi, theta, x, y, lr):
    gp, gt = dl_dphi(theta, phi, x, y), dl_dtheta(theta, phi, x, y)
    return phi - lr * gp, theta - lr * gt


if __name__ == "__main__":
    print(meta_step(1.0, 1.0, 1.0, 0.0, 0.1, 1))
