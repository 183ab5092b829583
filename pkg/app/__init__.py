# Semantic fusion engine package
