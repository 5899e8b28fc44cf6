"""
Command blueprints for the benchmark CLI
"""
