from setuptools import setup, find_packages


with open('README.md', 'r') as fdesc:
    long_description = fdesc.read()

setup(
    name='richwasm',
    version='0.1.0',
    description='A Typed Intermediate Language with Linear and Unrestricted Memory, Lowered to WebAssembly',
    packages=find_packages(exclude=['tests*']),
    long_description=long_description,
    long_description_content_type='text/markdown',
    classifiers=[
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python",
        "Intended Audience :: Developers",
        "Topic :: Software Development :: Compilers",
        "Programming Language :: Python :: 3",
    ],
    keywords='webassembly, linear types, type checker, interpreter, compiler',
    license='MIT',
    install_requires=['leb128 >= 1.0.0, < 2.0.0',
                      'matplotlib >= 3.1.0, < 4.0.0',
                      'numpy >= 1.17.0, < 2.0.0',
                      'pandas >= 1.0.0, < 3.0.0',
                      'ply >= 3.11, < 4.0',
                      'scipy >= 1.7.0, < 2.0.0'],
    python_requires='>=3.7, <4.0',
    entry_points={
        'console_scripts': ['richwasm = richwasm.cli:main'],
    },
    extras_require={
        'tests': ['pytest == 6.2.*',
                  'hypothesis >= 6.0.0, < 7.0.0'],
        'docs': ['sphinx == 6.2.*',
                 'sphinx_rtd_theme == 1.2.*']
    }
)
