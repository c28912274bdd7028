from setuptools import setup, find_packages

setup(
    name="reefdeploy",
    version="0.1",
    packages=find_packages(exclude=["tests", "tests.*"]),
    python_requires=">=3.10",
    install_requires=[
        "boto3",
        "click",
        "httpx",
        "numpy",
        "pandas",
        "pillow",
        "pydantic",
        "python-dotenv",
    ],
    extras_require={
        "test": [
            "fastapi",
            "geojson",
            "pytest",
        ],
    },
    entry_points={
        "console_scripts": [
            "reefdeploy=reefdeploy.app:cli",
        ],
    },
)
