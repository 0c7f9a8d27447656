"""
Headless closed-loop simulation
"""
