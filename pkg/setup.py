from setuptools import setup


pkg_vars = {}
with open("src/brokenray/_version.py") as fp:
    exec(fp.read(), pkg_vars)


def setup_package():
    meta_data = dict(name='brokenray',
                     version=pkg_vars['__version__'],
                     description='Generalized broken rays and Lagrangian relations of many-body scattering',
                     long_description=open('README.md').read(),
                     long_description_content_type="text/markdown",
                     license='MIT',
                     packages=['brokenray'],
                     python_requires='>=3.8',
                     install_requires=[
                         'numpy',
                         'scipy',
                     ],
                     package_dir={'': 'src'},
                     entry_points={
                         'console_scripts': ['brokenray = brokenray.cli:main'],
                     },
                     classifiers=[
                         'Development Status :: 3 - Alpha',
                         'Intended Audience :: Education',
                         'Intended Audience :: Science/Research',
                         'License :: OSI Approved :: MIT License',
                         'Programming Language :: Python :: 3',
                         'Topic :: Scientific/Engineering :: Mathematics',
                         'Topic :: Scientific/Engineering :: Physics',
                         'Topic :: Software Development :: Libraries :: Python Modules',
                     ],
                     )

    setup(**meta_data)


if __name__ == '__main__':
    setup_package()
