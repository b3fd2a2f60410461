import setuptools


with open('README.md', 'r') as fh:
    long_description = fh.read()

setuptools.setup(
    name='futcr-lab',
    version='0.1.0',
    scripts=['bin/futcr-lab'],
    python_requires='>=3.8',
    description='Continual panoptic segmentation with future-aware region '
                'contrast on synthetic scenes',
    long_description=long_description,
    long_description_content_type='text/markdown',
    packages=setuptools.find_packages(exclude=['examples', 'docs', 'tests']),
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
        'Operating System :: POSIX :: Linux',
    ],
    install_requires=['autouri>=0.1.2.1', 'numpy>=1.20', 'scipy>=1.6',
                      'torch>=2.0', 'pyyaml>=5.1'],
    extras_require={'test': ['pytest>=6']},
    tests_require=['pytest>=6'],
)
