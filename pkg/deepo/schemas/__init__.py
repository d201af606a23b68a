"""
Pydantic models shared across the DeePO services.
"""
