"""Independent brute-force reference computations (plain Python, no mplab imports)."""
