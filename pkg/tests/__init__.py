"""
losbroadcast test suite

One module per library module. run_tests.py discovers them; the long
Monte Carlo tests run only with --slow.
"""
