# Test suites for guidg-mini
