# API endpoints package
