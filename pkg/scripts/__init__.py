"""Initialize scripts package."""
