from setuptools import setup

long_description = ''

with open('docs/mobilesensors.md', 'r') as fh:
    long_description = fh.read()


DEV_REQS = ['black', 'flake8', 'isort', 'mypy']
TEST_REQS = ['snakemake', 'pytest', 'pytest-cov', 'hypothesis']

setup(
    name='mobilesensors',
    version='0.1.0',
    packages=['mobilesensors'],
    package_dir={'': 'src'},
    description='Observability-based path planning of mobile sensors for reduced-order models',
    long_description=long_description,
    long_description_content_type='text/markdown',
    install_requires=[
        'numpy>=1.17',
        'scipy>=1.4',
        'pandas>=1.0',
        'matplotlib>=3.1',
        'pyyaml>=5.1',
        'tqdm',
        'typing_extensions',
    ],
    extras_require={'dev': DEV_REQS + TEST_REQS, 'test': TEST_REQS},
    entry_points={'console_scripts': ['mobilesensors=mobilesensors.main:main']},
    python_requires='>=3.7',
)
